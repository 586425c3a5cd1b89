//! One function per pipeline stage, shared by the CLI and by in-process
//! callers. Every stage reads and writes files only through these.

use std::fs;
use std::path::{Path, PathBuf};

use cstn_core::model::enhance;
use cstn_core::mri::{simulate_lowres, MultiEchoVolume};
use cstn_core::phantom::generate_phantom;
use cstn_core::smwi::{reconstruct_smwi, SmwiParams};
use cstn_core::Tensor;

use crate::checkpoint;
use crate::config::{RunConfig, PROTOCOLS};
use crate::cst;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::png_export::{self, Window};
use crate::report;
use crate::volume;

/// Output directory of phantom `index` of a set.
pub fn phantom_dir(out: &Path, index: usize) -> PathBuf {
    out.join(format!("phantom-{index:03}"))
}

/// Writes `count` phantoms (volume plus ground-truth maps); phantom `i`
/// uses seed `seed + i`.
pub fn phantoms(seed: u64, count: usize, size: usize, tes: &[f64], out: &Path) -> Result<Vec<PathBuf>> {
    (0..count)
        .map(|i| {
            let (v, maps) = generate_phantom(seed.wrapping_add(i as u64), size, size, tes)?;
            let dir = phantom_dir(out, i);
            volume::save(&dir, &v)?;
            volume::save_maps(&dir, &maps)?;
            Ok(dir)
        })
        .collect()
}

pub fn downsample(input: &Path, target: usize, out: &Path) -> Result<MultiEchoVolume> {
    let lr = simulate_lowres(&volume::load(input)?, target, target)?;
    volume::save(out, &lr)?;
    Ok(lr)
}

pub fn infer(ckpt: &Path, input: &Path, out: &Path) -> Result<MultiEchoVolume> {
    let c = checkpoint::load(ckpt)?;
    let hq = enhance(&volume::load(input)?, &c.config, &c.weights)?;
    volume::save(out, &hq)?;
    Ok(hq)
}

/// Writes the SMWI image of a volume as a 2-D `.cst` tensor.
pub fn smwi(input: &Path, params: &SmwiParams, out: &Path) -> Result<Tensor> {
    let img = reconstruct_smwi(&volume::load(input)?, params)?.image;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    cst::save(out, &img)?;
    Ok(img)
}

/// Volume subdirectories of `data` (those holding a magnitude file), by name.
pub fn scan_dirs(data: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(data).map_err(|e| Error::io(data, e))? {
        let path = entry.map_err(|e| Error::io(data, e))?.path();
        if path.join(volume::MAGNITUDE_FILE).is_file() {
            out.push((path.file_name().unwrap().to_string_lossy().into_owned(), path));
        }
    }
    if out.is_empty() {
        return Err(Error::format(data, "no volumes found"));
    }
    out.sort();
    Ok(out)
}

/// Evaluates every volume under `data` at each protocol and writes
/// `report.csv` / `report.txt` into `out`. Without a checkpoint only the
/// bicubic baseline is scored.
pub fn eval(ckpt: Option<&Path>, data: &Path, protocols: &[usize], cfg: &RunConfig, threads: usize, out: &Path) -> Result<Vec<EvalReport>> {
    if let Some(p) = protocols.iter().find(|p| !PROTOCOLS.contains(p)) {
        return Err(Error::Usage(format!("protocol {p} is not one of {PROTOCOLS:?}")));
    }
    let model = ckpt.map(checkpoint::load).transpose()?;
    let scans = scan_dirs(data)?
        .into_iter()
        .map(|(id, p)| Ok((id, volume::load(&p)?)))
        .collect::<Result<Vec<_>>>()?;
    let reports = protocols
        .iter()
        .map(|&p| evaluate(model.as_ref().map(|c| (&c.config, &c.weights)), &scans, p, &cfg.smwi, threads))
        .collect::<Result<Vec<_>>>()?;
    report::write(out, &reports)?;
    Ok(reports)
}

/// Exports a 2-D `.cst` tensor, or slice `index` of a 3-D one, as PNG.
pub fn export_png(input: &Path, index: usize, out: &Path) -> Result<Window> {
    let t = cst::load(input)?;
    let slice = match t.ndim() {
        2 => t,
        3 if index < t.shape()[0] => t.index_axis0(index)?,
        3 => return Err(Error::Usage(format!("slice {index} out of range for {} slices", t.shape()[0]))),
        _ => return Err(Error::format(input, format!("expected a 2-D or 3-D tensor, got shape {:?}", t.shape()))),
    };
    png_export::export(&slice, out)
}
