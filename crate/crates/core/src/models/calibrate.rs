//! Block-count calibration against published parameter/MACs totals.
//!
//! With width and options fixed, both totals are affine in the block counts:
//! `cost = base + Σ n_i · block_i`. The per-slot costs are measured once by
//! profiling, then every combination in the search space is scored
//! arithmetically.

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelInstance};
use crate::efficiency::{count_macs, Costed, MacsPolicy, GATE_HEIGHT, GATE_WIDTH};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    pub params: f64,
    pub macs: f64,
    /// Relative tolerances.
    pub params_tol: f64,
    pub macs_tol: f64,
    /// When set, candidates may not exceed the targets (published values are
    /// upper bounds).
    pub upper_bound: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSpace {
    pub enc_max: Vec<usize>,
    pub middle_max: usize,
    pub dec_max: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub enc_blocks: Vec<usize>,
    pub middle_blocks: usize,
    pub dec_blocks: Vec<usize>,
    pub params: u64,
    pub macs: u64,
}

impl Candidate {
    pub fn total_blocks(&self) -> usize {
        self.enc_blocks.iter().sum::<usize>()
            + self.middle_blocks
            + self.dec_blocks.iter().sum::<usize>()
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            enc_blocks: self.enc_blocks.clone(),
            middle_blocks: self.middle_blocks,
            dec_blocks: self.dec_blocks.clone(),
            ..base.clone()
        }
    }
}

/// Per-slot costs: `(params, macs)` of the zero-block skeleton and of one
/// block in each slot (encoder levels, middle, decoders).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCosts {
    pub base: (u64, u64),
    pub enc: Vec<(u64, u64)>,
    pub middle: (u64, u64),
    pub dec: Vec<(u64, u64)>,
}

fn cost(cfg: &ModelConfig, policy: MacsPolicy) -> Result<(u64, u64)> {
    let m = ModelInstance::build(cfg, DType::F32, 0)?;
    let r = count_macs(&m, GATE_HEIGHT, GATE_WIDTH, policy)?;
    debug_assert_eq!(m.divisor(), cfg.divisor());
    Ok((r.params_total, r.macs_total))
}

fn diff(a: (u64, u64), b: (u64, u64)) -> (u64, u64) {
    (a.0 - b.0, a.1 - b.1)
}

impl BlockCosts {
    pub fn measure(base: &ModelConfig, policy: MacsPolicy) -> Result<Self> {
        if !base.family.is_naf() {
            return Err(Error::Config(
                "calibration is defined for the NAFBlock families".into(),
            ));
        }
        let levels = base.levels();
        let zero = ModelConfig {
            enc_blocks: vec![0; levels],
            middle_blocks: 0,
            dec_blocks: vec![0; levels],
            ..base.clone()
        };
        let b = cost(&zero, policy)?;
        let mut enc = Vec::new();
        let mut dec = Vec::new();
        for i in 0..levels {
            let mut c = zero.clone();
            c.enc_blocks[i] = 1;
            enc.push(diff(cost(&c, policy)?, b));
            let mut c = zero.clone();
            c.dec_blocks[i] = 1;
            dec.push(diff(cost(&c, policy)?, b));
        }
        let mut c = zero.clone();
        c.middle_blocks = 1;
        let middle = diff(cost(&c, policy)?, b);
        Ok(Self {
            base: b,
            enc,
            middle,
            dec,
        })
    }

    pub fn evaluate(&self, enc: &[usize], middle: usize, dec: &[usize]) -> (u64, u64) {
        let mut p = self.base;
        let mut add = |n: usize, c: (u64, u64)| {
            p.0 += n as u64 * c.0;
            p.1 += n as u64 * c.1;
        };
        for (n, c) in enc.iter().zip(&self.enc) {
            add(*n, *c);
        }
        add(middle, self.middle);
        for (n, c) in dec.iter().zip(&self.dec) {
            add(*n, *c);
        }
        p
    }
}

fn within(value: u64, target: f64, tol: f64, upper: bool) -> bool {
    let v = value as f64;
    if upper {
        v <= target && v >= target * (1.0 - tol)
    } else {
        (v / target - 1.0).abs() <= tol
    }
}

/// All in-tolerance candidates (every slot at least one block), ranked by
/// fewest total blocks, then most middle blocks, then combined relative
/// error.
pub fn calibrate_blocks(
    base: &ModelConfig,
    space: &CalibrationSpace,
    target: &CalibrationTarget,
    policy: MacsPolicy,
) -> Result<Vec<Candidate>> {
    let levels = base.levels();
    if space.enc_max.len() != levels || space.dec_max.len() != levels {
        return Err(Error::Config(format!(
            "search space must list {levels} levels"
        )));
    }
    let costs = BlockCosts::measure(base, policy)?;
    let p_cap = target.params * (1.0 + target.params_tol);
    let m_cap = target.macs * (1.0 + target.macs_tol);
    // slots: enc levels, middle, dec levels
    let mut slots: Vec<((u64, u64), usize)> = costs
        .enc
        .iter()
        .copied()
        .zip(space.enc_max.iter().copied())
        .collect();
    slots.push((costs.middle, space.middle_max));
    slots.extend(costs.dec.iter().copied().zip(space.dec_max.iter().copied()));
    let mut found = Vec::new();
    let mut counts = vec![1usize; slots.len()];
    let start = slots
        .iter()
        .fold(costs.base, |acc, (c, _)| (acc.0 + c.0, acc.1 + c.1));
    fn rec(
        i: usize,
        acc: (u64, u64),
        slots: &[((u64, u64), usize)],
        counts: &mut Vec<usize>,
        caps: (f64, f64),
        out: &mut Vec<(Vec<usize>, (u64, u64))>,
    ) {
        if acc.0 as f64 > caps.0 || acc.1 as f64 > caps.1 {
            return;
        }
        if i == slots.len() {
            out.push((counts.clone(), acc));
            return;
        }
        let (c, max) = slots[i];
        let mut a = acc;
        for n in 1..=max.max(1) {
            counts[i] = n;
            rec(i + 1, a, slots, counts, caps, out);
            a = (a.0 + c.0, a.1 + c.1);
            if a.0 as f64 > caps.0 || a.1 as f64 > caps.1 {
                break;
            }
        }
        counts[i] = 1;
    }
    let mut raw = Vec::new();
    rec(0, start, &slots, &mut counts, (p_cap, m_cap), &mut raw);
    for (c, (p, m)) in raw {
        if within(p, target.params, target.params_tol, target.upper_bound)
            && within(m, target.macs, target.macs_tol, target.upper_bound)
        {
            found.push(Candidate {
                enc_blocks: c[..levels].to_vec(),
                middle_blocks: c[levels],
                dec_blocks: c[levels + 1..].to_vec(),
                params: p,
                macs: m,
            });
        }
    }
    let err = |c: &Candidate| {
        (c.params as f64 / target.params - 1.0).abs() + (c.macs as f64 / target.macs - 1.0).abs()
    };
    found.sort_by(|a, b| {
        a.total_blocks()
            .cmp(&b.total_blocks())
            .then(b.middle_blocks.cmp(&a.middle_blocks))
            .then(err(a).total_cmp(&err(b)))
            .then(a.enc_blocks.cmp(&b.enc_blocks))
            .then(a.dec_blocks.cmp(&b.dec_blocks))
    });
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_decomposition_matches_direct_count() {
        let base = ModelConfig::nafnet(8, 1);
        let costs = BlockCosts::measure(&base, MacsPolicy::challenge()).unwrap();
        let mut cfg = base.clone();
        cfg.enc_blocks = vec![2, 1, 3, 1];
        cfg.middle_blocks = 2;
        cfg.dec_blocks = vec![1, 2, 1, 1];
        let direct = cost(&cfg, MacsPolicy::challenge()).unwrap();
        assert_eq!(costs.evaluate(&cfg.enc_blocks, 2, &cfg.dec_blocks), direct);
    }
}
