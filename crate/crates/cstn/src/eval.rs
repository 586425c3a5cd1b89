//! Evaluation harness: truncation → enhancement → metrics, per scan, with
//! the bicubic-only baseline alongside.

use cstn_core::metrics::{aggregate, dynamic_range, mae, mse, ssim, MetricReport};
use cstn_core::model::{bicubic_baseline, enhance, CstnConfig, CstnWeights};
use cstn_core::mri::{simulate_lowres, MultiEchoVolume};
use cstn_core::smwi::{reconstruct_smwi, SmwiParams};
use cstn_core::Error as CoreError;
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Echo magnitudes, averaged over echoes.
    Image,
    /// SMWI reconstructions of the whole volume.
    Smwi,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Image => "image",
            Domain::Smwi => "smwi",
        }
    }
}

/// `[mse, mae, ssim]` for one scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub mse: f64,
    pub mae: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanScores {
    pub image: Scores,
    pub smwi: Scores,
}

impl ScanScores {
    pub fn get(&self, d: Domain) -> Scores {
        match d {
            Domain::Image => self.image,
            Domain::Smwi => self.smwi,
        }
    }
}

fn scores(pred: &cstn_core::Tensor, gt: &cstn_core::Tensor) -> Result<Scores> {
    Ok(Scores {
        mse: mse(pred, gt)?,
        mae: mae(pred, gt)?,
        ssim: ssim(pred, gt, dynamic_range(gt))?,
    })
}

/// Image- and SMWI-domain scores of `pred` against `gt`.
pub fn score(pred: &MultiEchoVolume, gt: &MultiEchoVolume, smwi: &SmwiParams) -> Result<ScanScores> {
    if pred.num_echoes() != gt.num_echoes() {
        return Err(CoreError::ShapeMismatch {
            op: "score",
            lhs: vec![pred.num_echoes(), pred.height(), pred.width()],
            rhs: vec![gt.num_echoes(), gt.height(), gt.width()],
        }
        .into());
    }
    let mut acc = [0.0f64; 3];
    for (p, g) in pred.echoes().iter().zip(gt.echoes()) {
        let s = scores(&p.magnitude_tensor(), &g.magnitude_tensor())?;
        acc[0] += s.mse;
        acc[1] += s.mae;
        acc[2] += s.ssim;
    }
    let e = gt.num_echoes() as f64;
    let image = Scores {
        mse: acc[0] / e,
        mae: acc[1] / e,
        ssim: acc[2] / e,
    };
    let sp = reconstruct_smwi(pred, smwi)?;
    let sg = reconstruct_smwi(gt, smwi)?;
    Ok(ScanScores {
        image,
        smwi: scores(&sp.image, &sg.image)?,
    })
}

/// Mean ± std tables of one method in one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub method: String,
    pub domain: Domain,
    pub mse: MetricReport,
    pub mae: MetricReport,
    pub ssim: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: usize,
    pub height: usize,
    pub width: usize,
    pub rows: Vec<MethodReport>,
}

impl EvalReport {
    pub fn find(&self, method: &str, domain: Domain) -> Option<&MethodReport> {
        self.rows.iter().find(|r| r.method == method && r.domain == domain)
    }
}

pub const CSTN: &str = "cstn";
pub const BICUBIC: &str = "bicubic";

fn method_reports(method: &str, ids: &[String], per_scan: &[ScanScores]) -> Result<Vec<MethodReport>> {
    [Domain::Image, Domain::Smwi]
        .into_iter()
        .map(|d| {
            let col = |f: fn(&Scores) -> f64| per_scan.iter().map(|s| f(&s.get(d))).collect::<Vec<_>>();
            Ok(MethodReport {
                method: method.into(),
                domain: d,
                mse: aggregate("mse", ids.to_vec(), col(|s| s.mse))?,
                mae: aggregate("mae", ids.to_vec(), col(|s| s.mae))?,
                ssim: aggregate("ssim", ids.to_vec(), col(|s| s.ssim))?,
            })
        })
        .collect()
}

pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))
}

/// Scores the bicubic baseline and, when `model` is given, the network on
/// every `(id, high-res volume)` scan at one truncation size. Scans run in
/// parallel on `threads` workers; results keep the scan order.
pub fn evaluate(
    model: Option<(&CstnConfig, &CstnWeights)>,
    scans: &[(String, MultiEchoVolume)],
    protocol: usize,
    smwi: &SmwiParams,
    threads: usize,
) -> Result<EvalReport> {
    let first = &scans.first().ok_or_else(|| Error::Usage("no scans to evaluate".into()))?.1;
    let (h, w) = (first.height(), first.width());
    if let Some((cfg, _)) = model {
        if cfg.target_size != (h, w) {
            return Err(CoreError::ConfigMismatch {
                key: "model.target_height/width".into(),
                expected: format!("{}x{}", h, w),
                found: format!("{}x{}", cfg.target_size.0, cfg.target_size.1),
            }
            .into());
        }
    }
    let per_scan: Vec<(ScanScores, Option<ScanScores>)> = thread_pool(threads)?.install(|| {
        scans
            .par_iter()
            .map(|(_, hr)| -> Result<_> {
                if (hr.height(), hr.width()) != (h, w) {
                    return Err(CoreError::ShapeMismatch {
                        op: "evaluate (scan sizes)",
                        lhs: vec![h, w],
                        rhs: vec![hr.height(), hr.width()],
                    }
                    .into());
                }
                let lr = simulate_lowres(hr, protocol, protocol)?;
                let base = score(&bicubic_baseline(&lr, (h, w))?, hr, smwi)?;
                let net = match model {
                    Some((cfg, weights)) => Some(score(&enhance(&lr, cfg, weights)?, hr, smwi)?),
                    None => None,
                };
                Ok((base, net))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let ids: Vec<String> = scans.iter().map(|(id, _)| id.clone()).collect();
    let base: Vec<ScanScores> = per_scan.iter().map(|p| p.0).collect();
    let mut rows = method_reports(BICUBIC, &ids, &base)?;
    if model.is_some() {
        let net: Vec<ScanScores> = per_scan.iter().map(|p| p.1.unwrap()).collect();
        rows.extend(method_reports(CSTN, &ids, &net)?);
    }
    Ok(EvalReport {
        protocol,
        height: h,
        width: w,
        rows,
    })
}
