//! Multiply-accumulate (MAC) accounting and the budget-band cost loss.
//!
//! FLOPs throughout the crate means multiply-accumulate operations per input
//! sample. Searchable depthwise layers cost `H'·W'·area` per filter; every
//! other layer contributes a constant.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Target `T`, slack `η` and weight `λ_cost`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBudget {
    pub target: f64,
    pub eta: f64,
    pub lambda_cost: f64,
}

impl CostBudget {
    pub fn new(target: f64, eta: f64, lambda_cost: f64) -> Result<Self> {
        if !(target > 0.0 && target.is_finite()) {
            return Err(Error::invalid(format!("budget target must be positive, got {target}")));
        }
        if !(0.0..1.0).contains(&eta) {
            return Err(Error::invalid(format!("slack must lie in [0, 1), got {eta}")));
        }
        if !(lambda_cost >= 0.0) {
            return Err(Error::invalid(format!("lambda_cost must be >= 0, got {lambda_cost}")));
        }
        Ok(CostBudget {
            target,
            eta,
            lambda_cost,
        })
    }

    pub fn lower(&self) -> f64 {
        self.target * (1.0 - self.eta)
    }

    pub fn upper(&self) -> f64 {
        self.target * (1.0 + self.eta)
    }

    pub fn position(&self, expected: f64) -> BandPosition {
        if expected < self.lower() {
            BandPosition::Below
        } else if expected > self.upper() {
            BandPosition::Above
        } else {
            BandPosition::Inside
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandPosition {
    Below,
    Inside,
    Above,
}

/// Cost description of one searchable depthwise layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCostSpec {
    pub out_h: usize,
    pub out_w: usize,
    pub channels: usize,
    pub stride: usize,
    /// Kernel area per option, 0 for None.
    pub areas: Vec<f64>,
}

impl LayerCostSpec {
    fn pixels(&self) -> f64 {
        (self.out_h * self.out_w) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub layers: Vec<LayerCostSpec>,
    /// MACs of all non-searched layers.
    pub fixed: f64,
}

impl CostModel {
    /// Cost with every filter on its largest option.
    pub fn max_flops(&self) -> f64 {
        self.fixed
            + self
                .layers
                .iter()
                .map(|l| l.pixels() * l.channels as f64 * l.areas.iter().copied().fold(0.0, f64::max))
                .sum::<f64>()
    }

    /// Cost with every filter on the same option index.
    pub fn uniform_flops(&self, option: usize) -> f64 {
        self.fixed
            + self
                .layers
                .iter()
                .map(|l| l.pixels() * l.channels as f64 * l.areas[option])
                .sum::<f64>()
    }
}

/// MACs of a concrete architecture; `arch[layer][filter]` is an option index.
pub fn flops_of_arch(arch: &[Vec<usize>], model: &CostModel) -> Result<f64> {
    if arch.len() != model.layers.len() {
        return Err(Error::invalid(format!(
            "{} layer choices for {} searchable layers",
            arch.len(),
            model.layers.len()
        )));
    }
    let mut total = model.fixed;
    for (l, (choices, spec)) in arch.iter().zip(&model.layers).enumerate() {
        if choices.len() != spec.channels {
            return Err(Error::invalid(format!(
                "layer {l}: {} choices for {} filters",
                choices.len(),
                spec.channels
            )));
        }
        for &c in choices {
            let area = spec.areas.get(c).ok_or_else(|| {
                Error::invalid(format!("layer {l}: option {c} out of range ({} options)", spec.areas.len()))
            })?;
            total += spec.pixels() * area;
        }
    }
    Ok(total)
}

fn rows_multiplier(rows: usize, spec: &LayerCostSpec, layer: usize) -> Result<f64> {
    if rows == spec.channels {
        Ok(1.0)
    } else if rows == 1 {
        Ok(spec.channels as f64)
    } else {
        Err(Error::shape(format!(
            "layer {layer}: {rows} probability rows for {} filters",
            spec.channels
        )))
    }
}

/// `E[C]` from plain probability matrices (`[C or 1, options]` per layer).
pub fn expected_flops_plain(probs: &[Tensor], model: &CostModel) -> Result<f64> {
    if probs.len() != model.layers.len() {
        return Err(Error::invalid("probability list does not match layers"));
    }
    let mut total = model.fixed;
    for (l, (p, spec)) in probs.iter().zip(&model.layers).enumerate() {
        let [rows, n] = p.dims2()?;
        if n != spec.areas.len() {
            return Err(Error::shape(format!("layer {l}: {n} probabilities for {} options", spec.areas.len())));
        }
        let mult = rows_multiplier(rows, spec, l)?;
        let per_rows: f64 = p
            .data()
            .chunks(n)
            .map(|row| row.iter().zip(&spec.areas).map(|(p, a)| p * a).sum::<f64>())
            .sum();
        total += spec.pixels() * mult * per_rows;
    }
    Ok(total)
}

/// Differentiable `E[C] = fixed + Σ_layers H'W' Σ_filters Σ_i p_i · area_i`.
pub fn expected_flops(tape: &Tape, probs: &[Var], model: &CostModel) -> Result<Var> {
    if probs.len() != model.layers.len() {
        return Err(Error::invalid("probability list does not match layers"));
    }
    let mut total: Option<Var> = None;
    for (l, (&p, spec)) in probs.iter().zip(&model.layers).enumerate() {
        let [rows, n] = tape.value(p).dims2()?;
        if n != spec.areas.len() {
            return Err(Error::shape(format!("layer {l}: {n} probabilities for {} options", spec.areas.len())));
        }
        let mult = rows_multiplier(rows, spec, l)?;
        let areas = tape.constant(Tensor::new(&[n, 1], spec.areas.clone())?);
        let per_filter = tape.matmul(p, areas)?;
        let layer = tape.scale(tape.sum(per_filter), spec.pixels() * mult);
        total = Some(match total {
            None => layer,
            Some(t) => tape.add(t, layer)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(tape.add_scalar(total, model.fixed))
}

/// Budget-band loss: `-log E` below `T(1-η)`, `log E` above `T(1+η)`, else 0.
pub fn flops_loss_value(expected: f64, budget: &CostBudget) -> Result<f64> {
    match budget.position(expected) {
        BandPosition::Inside => Ok(0.0),
        _ if expected <= 0.0 => Err(degenerate(expected)),
        BandPosition::Below => Ok(-expected.ln()),
        BandPosition::Above => Ok(expected.ln()),
    }
}

fn degenerate(expected: f64) -> Error {
    Error::invalid(format!(
        "expected cost {expected} is not positive; the cost loss is undefined (all-None supernet?)"
    ))
}

/// Taped budget-band loss; exactly zero with zero gradient inside the band.
pub fn flops_loss(tape: &Tape, expected: Var, budget: &CostBudget) -> Result<Var> {
    let e = tape.value(expected).item();
    match budget.position(e) {
        BandPosition::Inside => Ok(tape.scale(expected, 0.0)),
        _ if e <= 0.0 => Err(degenerate(e)),
        BandPosition::Below => Ok(tape.scale(tape.log(expected)?, -1.0)),
        BandPosition::Above => tape.log(expected),
    }
}
