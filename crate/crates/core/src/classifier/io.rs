use std::io::{BufRead, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{AdaptiveClassifier, ClassifierConfig, StatePrior, WriterProfile};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PHW1";
const VERSION: u32 = 1;

/// Contents of `wcnn.bin`.
#[derive(Debug, Clone, PartialEq)]
pub struct WcnnFile {
    pub model: AdaptiveClassifier,
    pub prior: StatePrior,
    /// Codes of the training writers.
    pub profiles: Vec<WriterProfile>,
}

fn write_f32s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    for &x in v {
        w.write_f32::<LittleEndian>(x as f32)?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, out: &mut [f64]) -> Result<()> {
    for x in out.iter_mut() {
        *x = r.read_f32::<LittleEndian>()? as f64;
    }
    Ok(())
}

/// `wcnn.bin`: magic `PHW1`, u32 version, u32 patch height and width, u32
/// length + JSON layer configuration, u32 output count; then as f32: base
/// parameters, running means and variances, adaptation matrices, the state
/// prior, and per training writer a u32 id followed by its code.
pub fn write_wcnn(w: &mut impl Write, file: &WcnnFile) -> Result<()> {
    let m = &file.model;
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(m.patch_height as u32)?;
    w.write_u32::<LittleEndian>(m.patch_width as u32)?;
    let cfg = serde_json::to_vec(&m.config).map_err(|e| Error::Format(e.to_string()))?;
    w.write_u32::<LittleEndian>(cfg.len() as u32)?;
    w.write_all(&cfg)?;
    w.write_u32::<LittleEndian>(m.num_outputs() as u32)?;
    for p in m.base_params() {
        write_f32s(w, p)?;
    }
    for b in &m.blocks {
        write_f32s(w, &b.running_mean)?;
        write_f32s(w, &b.running_var)?;
    }
    for a in m.adapt_params() {
        write_f32s(w, a)?;
    }
    if file.prior.probs.len() != m.num_outputs() {
        return Err(Error::Dimension("prior length differs from the output count".into()));
    }
    write_f32s(w, &file.prior.probs)?;
    w.write_u32::<LittleEndian>(file.profiles.len() as u32)?;
    for p in &file.profiles {
        w.write_u32::<LittleEndian>(p.writer_id)?;
        write_f32s(w, &p.code)?;
    }
    Ok(())
}

pub fn read_wcnn(r: &mut impl Read) -> Result<WcnnFile> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("wcnn.bin: bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("wcnn.bin: unsupported version {version}")));
    }
    let ph = r.read_u32::<LittleEndian>()? as usize;
    let pw = r.read_u32::<LittleEndian>()? as usize;
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    let config: ClassifierConfig =
        serde_json::from_slice(&buf).map_err(|e| Error::Format(format!("wcnn.bin config: {e}")))?;
    let outputs = r.read_u32::<LittleEndian>()? as usize;
    let mut model = AdaptiveClassifier::new(config, ph, pw, outputs, 0)?;
    for p in model.base_params_mut() {
        read_f32s(r, p)?;
    }
    for b in model.blocks.iter_mut() {
        read_f32s(r, &mut b.running_mean)?;
        read_f32s(r, &mut b.running_var)?;
    }
    for a in model.adapt_params_mut() {
        read_f32s(r, a)?;
    }
    let mut probs = vec![0.0; outputs];
    read_f32s(r, &mut probs)?;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut profiles = Vec::with_capacity(n);
    for _ in 0..n {
        let writer_id = r.read_u32::<LittleEndian>()?;
        let mut code = vec![0.0; model.code_dim()];
        read_f32s(r, &mut code)?;
        profiles.push(WriterProfile {
            writer_id,
            code,
            pass_count: 1,
            loss_history: Vec::new(),
        });
    }
    Ok(WcnnFile {
        model,
        prior: StatePrior { probs },
        profiles,
    })
}

/// `codes.csv`: header `writer_id,c0,...`, one row per writer.
pub fn write_codes_csv(w: &mut impl Write, profiles: &[WriterProfile]) -> Result<()> {
    let g = profiles.first().map_or(0, |p| p.code.len());
    let header: Vec<String> = std::iter::once("writer_id".to_string())
        .chain((0..g).map(|i| format!("c{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for p in profiles {
        let vals: Vec<String> = p.code.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{},{}", p.writer_id, vals.join(","))?;
    }
    Ok(())
}

pub fn read_codes_csv(r: impl BufRead) -> Result<Vec<WriterProfile>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("codes.csv: {line:?}"));
        let mut f = line.split(',');
        let writer_id = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let code = f.map(|v| v.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        out.push(WriterProfile {
            writer_id,
            code,
            pass_count: 1,
            loss_history: Vec::new(),
        });
    }
    Ok(out)
}
