use std::fmt::Write;

use super::train::{prepare_all, sample_all, train, TrainConfig};
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};

/// One row of the degradation-coefficient table.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub min_ade: f64,
    pub min_fde: f64,
    pub rf: f64,
    pub dao: f64,
    pub dac: f64,
}

impl SweepRow {
    pub fn new(alpha: f64, r: &MetricsReport) -> Self {
        SweepRow {
            alpha,
            min_ade: r.min_ade,
            min_fde: r.min_fde,
            rf: r.rf,
            dao: r.dao,
            dac: r.dac,
        }
    }
}

/// Trains one model per `alpha` with otherwise identical settings and scores
/// each best checkpoint on `val` with `base.k` hypotheses.
pub fn alpha_sweep(train_eps: &[Episode], val: &[Episode], alphas: &[f64], base: &TrainConfig) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(Error::Precondition("alpha sweep needs at least one value".into()));
    }
    alphas
        .iter()
        .map(|&alpha| {
            let cfg = TrainConfig {
                alpha,
                out_dir: base.out_dir.as_ref().map(|d| d.join(format!("alpha-{alpha}"))),
                ..base.clone()
            };
            let out = train(train_eps, val, &cfg)?;
            let prepared = prepare_all(&out.model, val)?;
            let preds = sample_all(&out.model, &prepared, cfg.k, cfg.seed)?;
            Ok(SweepRow::new(alpha, &evaluate(val, &preds)?))
        })
        .collect()
}

pub fn format_sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16} {:>10} {:>10} {:>8} {:>8} {:>8}",
        "Model", "minADE(↓)", "minFDE(↓)", "rF(↑)", "DAO(↑)", "DAC(↑)"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<16} {:>10.3} {:>10.3} {:>8.3} {:>8.2} {:>8.3}",
            format!("trajflow({})", r.alpha),
            r.min_ade,
            r.min_fde,
            r.rf,
            r.dao,
            r.dac
        );
    }
    s
}

/// Comma-separated version of the table.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("alpha,minADE,minFDE,rF,DAO,DAC\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.alpha, r.min_ade, r.min_fde, r.rf, r.dao, r.dac);
    }
    s
}
