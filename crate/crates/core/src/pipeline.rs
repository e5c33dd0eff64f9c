//! End-to-end evaluation of trained cascades and the loss ablation ladder.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Case;
use crate::error::{Error, Result};
use crate::inference::{finalize_mask, predict_cascade, prepare_input, Binarize, RoiConfig, TilingConfig};
use crate::losses::{LossWeights, Objective};
use crate::metrics::{evaluate_case, MetricsReport};
use crate::net3d::{build_unet, Network, UNetConfig};
use crate::trainer::{prepare_cases, refine, train, RrsConfig, TrainConfig, TrainLog};
use crate::volcore::write_atomic;

/// Threshold-map gating only makes sense for networks whose map was
/// trained, i.e. with a focal positive term; others use the scalar cut.
pub fn tiling_for(loss: &LossWeights, base: &TilingConfig) -> TilingConfig {
    let mut t = base.clone();
    if loss.delta_fpl <= 0.0 || loss.objective == Objective::CrossEntropy {
        t.binarize = Binarize::Scalar;
    }
    t
}

/// Scores every level of a cascade on labeled cases; report `k` uses the
/// level-`k` output.
pub fn evaluate_cascade(
    levels: &[Network],
    cases: &[Case],
    roi: &RoiConfig,
    tiling: &TilingConfig,
    label: &str,
) -> Result<Vec<MetricsReport>> {
    if levels.is_empty() {
        return Err(Error::InvalidInput("cascade has no levels".into()));
    }
    let mut per_level: Vec<Vec<_>> = vec![Vec::new(); levels.len()];
    for case in cases {
        let prep = prepare_input(&case.image, roi)?;
        let maps = predict_cascade(levels, &prep.image, tiling)?;
        for (k, m) in maps.iter().enumerate() {
            let mask = finalize_mask(&prep, m, tiling, case.mask.spacing())?;
            per_level[k].push(evaluate_case(&case.id, &mask, &case.mask)?);
        }
    }
    Ok(per_level
        .into_iter()
        .enumerate()
        .map(|(k, cases)| MetricsReport::new(format!("{label}/level{k}"), cases))
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub rrs: RrsConfig,
    pub roi: RoiConfig,
    pub tiling: TilingConfig,
    /// Seed of the network initialization.
    pub init_seed: u64,
}

/// One trained configuration of the ladder.
#[derive(Debug, Clone, PartialEq)]
pub struct Rung {
    pub name: &'static str,
    pub loss: LossWeights,
}

/// CEL, DCL, DCL-DDS, DCL-DDS-OVL and DCL-DDS-OVL-FPL, derived from the
/// full weights; refinement rungs reuse the last one.
pub fn ladder(full: &LossWeights) -> Vec<Rung> {
    let base = LossWeights {
        beta: [0.0; crate::net3d::SIDE_PATHS],
        gamma_ovl: 0.0,
        delta_fpl: 0.0,
        ..full.clone()
    };
    vec![
        Rung {
            name: "CEL",
            loss: LossWeights {
                objective: Objective::CrossEntropy,
                ..base.clone()
            },
        },
        Rung {
            name: "DCL",
            loss: LossWeights {
                objective: Objective::Composite,
                ..base.clone()
            },
        },
        Rung {
            name: "DCL-DDS",
            loss: LossWeights {
                objective: Objective::Composite,
                beta: full.beta,
                ..base.clone()
            },
        },
        Rung {
            name: "DCL-DDS-OVL",
            loss: LossWeights {
                objective: Objective::Composite,
                beta: full.beta,
                gamma_ovl: full.gamma_ovl,
                ..base
            },
        },
        Rung {
            name: "DCL-DDS-OVL-FPL",
            loss: LossWeights {
                objective: Objective::Composite,
                ..full.clone()
            },
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const CSV_HEADER: &'static str = "method,dice,conform,jaccard,adb_mm,hdb_mm";

    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let m = &r.report.mean;
            let _ = writeln!(
                s,
                "{},{:.6},{},{:.6},{},{}",
                r.method,
                m.dice,
                opt(m.conform),
                m.jaccard,
                opt(m.adb_mm),
                opt(m.hdb_mm)
            );
        }
        s
    }

    pub fn dice(&self, method: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method)
            .map(|r| r.report.mean.dice)
    }
}

/// Everything a ladder run produced, for callers that want more than the
/// table.
pub struct AblationRun {
    pub table: AblationTable,
    pub logs: Vec<(String, TrainLog)>,
    pub full_levels: Vec<Network>,
}

/// Trains each rung from the same initialization on the train split,
/// refines the full configuration `rrs.levels` times, and scores all of it
/// on the test split. `progress` receives one line per finished stage.
pub fn run_ablation(
    train_cases: &[Case],
    test_cases: &[Case],
    cfg: &AblationConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&str),
) -> Result<AblationRun> {
    let prepared = prepare_cases(train_cases, &cfg.roi)?;
    let mut table = AblationTable::default();
    let mut logs = Vec::new();
    let mut full_levels = Vec::new();
    let rungs = ladder(&cfg.train.loss);
    let last = rungs.len() - 1;
    for (i, rung) in rungs.into_iter().enumerate() {
        let tcfg = TrainConfig {
            loss: rung.loss.clone(),
            ..cfg.train.clone()
        };
        let net = build_unet(&cfg.unet, cfg.init_seed)?;
        let ck_path = out_dir.map(|d| d.join(format!("{}.ckpt.json", rung.name)));
        let (ck, log) = train(net, &prepared, &tcfg, ck_path.as_deref())?;
        if let Some(d) = out_dir {
            log.save_csv(&d.join(format!("{}.log.csv", rung.name)))?;
        }
        logs.push((rung.name.to_string(), log));
        let tiling = tiling_for(&rung.loss, &cfg.tiling);
        let mut levels = vec![ck.network.clone()];
        if i == last {
            for (k, (rck, rlog)) in refine(&ck, &prepared, &cfg.rrs, &tcfg, &tiling)?
                .into_iter()
                .enumerate()
            {
                if let Some(d) = out_dir {
                    rck.save(&d.join(format!("{}-RRS{}.ckpt.json", rung.name, k + 1)))?;
                    rlog.save_csv(&d.join(format!("{}-RRS{}.log.csv", rung.name, k + 1)))?;
                }
                logs.push((format!("RRS{}", k + 1), rlog));
                levels.push(rck.network);
            }
        }
        let reports = evaluate_cascade(&levels, test_cases, &cfg.roi, &tiling, rung.name)?;
        for (k, report) in reports.into_iter().enumerate() {
            let method = if k == 0 {
                rung.name.to_string()
            } else {
                format!("+RRS{k}")
            };
            progress(&format!("{method}: mean dice {:.4}", report.mean.dice));
            if let Some(d) = out_dir {
                report.save(
                    &d.join(format!("{method}.metrics.csv")),
                    &d.join(format!("{method}.metrics.json")),
                )?;
            }
            table.rows.push(AblationRow { method, report });
        }
        if i == last {
            full_levels = levels;
        }
    }
    if let Some(d) = out_dir {
        write_atomic(&d.join("ablation.csv"), table.to_csv().as_bytes())?;
    }
    Ok(AblationRun {
        table,
        logs,
        full_levels,
    })
}
