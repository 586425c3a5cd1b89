//! Multi-echo volumes on disk.
//!
//! A volume is a directory holding `magnitude.cst` and `phase.cst`
//! (`[E, H, W]` each) and `echoes.txt`, one echo time in ms per line.
//! Phantom ground truth adds `maps.cst` (`[5, H, W]`) with channel names in
//! `maps.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use cstn_core::mri::MultiEchoVolume;
use cstn_core::phantom::PhantomMaps;

use crate::cst;
use crate::error::{self, Error, Result};

pub const MAGNITUDE_FILE: &str = "magnitude.cst";
pub const PHASE_FILE: &str = "phase.cst";
pub const ECHOES_FILE: &str = "echoes.txt";
pub const MAPS_FILE: &str = "maps.cst";
pub const MAP_NAMES: [&str; 5] = ["m0", "r2star_per_ms", "freq_hz", "phi0", "inclusion_mask"];

pub fn echoes_text(tes: &[f64]) -> String {
    let mut s = String::from("# echo times (ms)\n");
    for te in tes {
        writeln!(s, "{te}").unwrap();
    }
    s
}

pub fn parse_echoes(text: &str, path: &Path) -> Result<Vec<f64>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.parse::<f64>().map_err(|_| Error::format(path, format!("bad echo time {l:?}"))))
        .collect()
}

pub fn save(dir: &Path, v: &MultiEchoVolume) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cst::save(&dir.join(MAGNITUDE_FILE), &v.magnitude_stack())?;
    cst::save(&dir.join(PHASE_FILE), &v.phase_stack())?;
    error::write(&dir.join(ECHOES_FILE), echoes_text(v.echo_times_ms()).as_bytes())
}

pub fn load(dir: &Path) -> Result<MultiEchoVolume> {
    let mag = cst::load(&dir.join(MAGNITUDE_FILE))?;
    let phase = cst::load(&dir.join(PHASE_FILE))?;
    let tpath = dir.join(ECHOES_FILE);
    let text = String::from_utf8(error::read(&tpath)?).map_err(|_| Error::format(&tpath, "not UTF-8"))?;
    let tes = parse_echoes(&text, &tpath)?;
    Ok(MultiEchoVolume::from_stacks(&mag, &phase, tes)?)
}

pub fn save_maps(dir: &Path, maps: &PhantomMaps) -> Result<()> {
    cst::save(&dir.join(MAPS_FILE), &maps.to_stack())?;
    error::write(&dir.join("maps.txt"), (MAP_NAMES.join("\n") + "\n").as_bytes())
}
