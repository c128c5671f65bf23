//! Training-compute accounting for rehearsal, augmentation, generative
//! replay and dreaming. Costs are FLOPs with one multiply-accumulate counted
//! as one FLOP; per-forward costs are inputs rather than measured.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cl::csv_err;
use crate::error::{Error, Result};

pub const TERA: f64 = 1e12;

/// Inputs to the cost model. Field names double as override keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostInputs {
    /// Images per task.
    pub n_img: f64,
    pub epochs: f64,
    /// Rehearsal samples per stream sample.
    pub rho: f64,
    /// Forward-pass multiples for a full training update.
    pub kappa_train: f64,
    /// Forward-pass multiples for an update of the prompt only.
    pub kappa_prompt: f64,
    /// Extra augmented copies per image.
    pub alpha: f64,
    pub n_dream: f64,
    pub n_gen_d2l: f64,
    pub n_gen_ddgr: f64,
    pub n_gen_aug: f64,
    /// Samples seen while fine-tuning the generator.
    pub n_ft: f64,
    /// Optimization steps per prompt.
    pub s_opt: f64,
    pub n_prompt: f64,
    pub c_fwd_backbone: f64,
    pub c_fwd_gen_d2l: f64,
    pub c_fwd_gen_aug: f64,
    /// One denoising step of the replay generator.
    pub c_step_gen: f64,
    /// Denoising evaluations per generated image.
    pub steps_eff: f64,
}

impl CostInputs {
    pub const PRESETS: [&'static str; 1] = ["paper-table7"];

    /// Named input sets. `paper-table7` holds per-forward costs solved back
    /// from published totals:
    /// backbone `273.61e12 / (2500 * 10 * 2 * 3)`,
    /// dreaming pipeline `1377.77e12 / 22500`,
    /// augmentation pipeline `1373.21e12 / 22500`,
    /// denoising step `1149.94e12 / (100 * 250)`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-table7" => Ok(Self {
                n_img: 2500.0,
                epochs: 10.0,
                rho: 1.0,
                kappa_train: 3.0,
                kappa_prompt: 2.0,
                alpha: 1.0,
                n_dream: 500.0 * 45.0,
                n_gen_d2l: 500.0 * 45.0,
                n_gen_ddgr: 20.0 * 5.0,
                n_gen_aug: 22500.0,
                n_ft: 15000.0 * 64.0,
                s_opt: 100.0,
                n_prompt: 45.0,
                c_fwd_backbone: 273.61e12 / 150_000.0,
                c_fwd_gen_d2l: 1377.77e12 / 22500.0,
                c_fwd_gen_aug: 1373.21e12 / 22500.0,
                c_step_gen: 1149.94e12 / 25_000.0,
                steps_eff: 250.0,
            }),
            other => Err(Error::Config(format!(
                "unknown cost preset `{other}` (known: {})",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    /// Sets one field by name.
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::Config(format!("`{key}` must be finite and non-negative")));
        }
        let mut map = match serde_json::to_value(&*self) {
            Ok(serde_json::Value::Object(m)) => m,
            _ => unreachable!("cost inputs serialize to an object"),
        };
        match map.get_mut(key) {
            Some(slot) => *slot = serde_json::json!(value),
            None => return Err(Error::Config(format!("unknown cost input `{key}`"))),
        }
        *self = serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("override `{o}` has a non-numeric value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let map = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in map.as_object().into_iter().flatten() {
            match v.as_f64() {
                Some(x) if x.is_finite() && x >= 0.0 => {}
                _ => return Err(Error::Config(format!("`{k}` must be finite and non-negative"))),
            }
        }
        Ok(())
    }

    /// Scales every per-forward cost by `s`.
    pub fn scale_forward_costs(&self, s: f64) -> Self {
        Self {
            c_fwd_backbone: self.c_fwd_backbone * s,
            c_fwd_gen_d2l: self.c_fwd_gen_d2l * s,
            c_fwd_gen_aug: self.c_fwd_gen_aug * s,
            c_step_gen: self.c_step_gen * s,
            ..self.clone()
        }
    }
}

/// Backbone training on one task with rehearsal.
pub fn c_cl(i: &CostInputs) -> f64 {
    i.n_img * i.epochs * (1.0 + i.rho) * i.kappa_train * i.c_fwd_backbone
}

/// Backbone training when every image carries `alpha` augmented copies.
pub fn c_cl_aug(i: &CostInputs) -> f64 {
    (1.0 + i.alpha) * c_cl(i)
}

/// Extra backbone training on dream samples.
pub fn c_cl_dream(i: &CostInputs) -> f64 {
    i.n_dream * i.epochs * (1.0 + i.rho) * i.kappa_train * i.c_fwd_backbone
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthMode {
    D2l,
    Ddgr,
    Augmentation,
}

/// Generating the synthetic images of one task.
pub fn c_synth(i: &CostInputs, mode: SynthMode) -> f64 {
    match mode {
        SynthMode::D2l => i.n_gen_d2l * i.c_fwd_gen_d2l,
        SynthMode::Augmentation => i.n_gen_aug * i.c_fwd_gen_aug,
        SynthMode::Ddgr => i.n_gen_ddgr * i.steps_eff * i.c_step_gen,
    }
}

/// Fine-tuning the replay generator.
pub fn c_gen_train(i: &CostInputs) -> f64 {
    i.n_ft * i.kappa_train * i.c_step_gen
}

/// Prompt optimization through frozen networks.
pub fn c_opt(i: &CostInputs) -> f64 {
    i.n_prompt * i.s_opt * i.kappa_prompt * i.c_fwd_gen_d2l
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMethod {
    ErAce,
    Mixup,
    Augmentation,
    Ddgr,
    D2l,
}

impl CostMethod {
    pub const ALL: [CostMethod; 5] = [Self::ErAce, Self::Mixup, Self::Augmentation, Self::Ddgr, Self::D2l];

    pub fn name(self) -> &'static str {
        match self {
            Self::ErAce => "ER-ACE",
            Self::Mixup => "Mixup",
            Self::Augmentation => "Diffusion Aug.",
            Self::Ddgr => "DDGR",
            Self::D2l => "D2L",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub method: CostMethod,
    /// Named terms in FLOPs; their sum is `total`.
    pub terms: Vec<(&'static str, f64)>,
    pub total: f64,
    /// `total` over the rehearsal-only total.
    pub relative: f64,
}

/// Term breakdown of one method. The reference for `relative` is plain
/// rehearsal training.
pub fn method_total(method: CostMethod, i: &CostInputs) -> CostReport {
    let cl = c_cl(i);
    let terms = match method {
        CostMethod::ErAce | CostMethod::Mixup => vec![("C_CL", cl)],
        CostMethod::Augmentation => vec![("C_CL", c_cl_aug(i)), ("C_synth", c_synth(i, SynthMode::Augmentation))],
        CostMethod::Ddgr => vec![
            ("C_gen_train", c_gen_train(i)),
            ("C_synth", c_synth(i, SynthMode::Ddgr)),
            ("C_CL", cl),
        ],
        CostMethod::D2l => vec![
            ("C_CL", cl),
            ("C'_CL", c_cl_dream(i)),
            ("C_opt", c_opt(i)),
            ("C_synth", c_synth(i, SynthMode::D2l)),
        ],
    };
    let total: f64 = terms.iter().map(|(_, v)| v).sum();
    CostReport {
        method,
        relative: if cl > 0.0 { total / cl } else { f64::NAN },
        terms,
        total,
    }
}

pub fn cost_table(i: &CostInputs) -> Vec<CostReport> {
    CostMethod::ALL.iter().map(|&m| method_total(m, i)).collect()
}

fn breakdown(r: &CostReport) -> String {
    r.terms
        .iter()
        .map(|(n, v)| format!("{n}={:.2}", v / TERA))
        .collect::<Vec<_>>()
        .join(" + ")
}

/// CSV with one row per method, TFLOPs to two decimals.
pub fn write_cost_csv<W: Write>(reports: &[CostReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "breakdown_tflops", "total_tflops", "relative"])
        .map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.method.name().to_string(),
            breakdown(r),
            format!("{:.2}", r.total / TERA),
            format!("{:.2}", r.relative),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Aligned text rendering of [`write_cost_csv`].
pub fn cost_text(reports: &[CostReport]) -> String {
    let width = reports.iter().map(|r| breakdown(r).len()).max().unwrap_or(0).max(9);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<15} {:<width$} {:>12} {:>9}",
        "method", "breakdown", "TFLOPs", "relative"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<15} {:<width$} {:>12.2} {:>8.2}x",
            r.method.name(),
            breakdown(r),
            r.total / TERA,
            r.relative
        );
    }
    s
}
