//! Modified Latin Hypercube Sampling (MLHS) draws.
//!
//! For each (person, dimension) pair a single offset `u ~ U(0,1)` is shifted
//! into every stratum, `(i + u) / n_draws`, and the strata are then put in a
//! random order with an independent shuffle. The RNG is ChaCha8 seeded from
//! the caller's seed and consumed person by person, dimension by dimension,
//! so a block is a pure function of `(n_persons, n_draws, n_dims, seed)`.

use std::io::Write;

use rand::distributions::{Distribution, Open01};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DrawError {
    #[error("draw block dimensions must all be at least 1")]
    ZeroCount,
    #[error("expected a {expected:?} block, got {found:?}")]
    WrongKind { expected: DrawKind, found: DrawKind },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawKind {
    Uniform01,
    StdNormal,
}

/// Draw tensor indexed `[person, draw, dimension]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawBlock {
    values: Vec<f64>,
    n_persons: usize,
    n_draws: usize,
    n_dims: usize,
    kind: DrawKind,
    seed: u64,
}

impl DrawBlock {
    pub fn n_persons(&self) -> usize {
        self.n_persons
    }
    pub fn n_draws(&self) -> usize {
        self.n_draws
    }
    pub fn n_dims(&self) -> usize {
        self.n_dims
    }
    pub fn kind(&self) -> DrawKind {
        self.kind
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, person: usize, draw: usize, dim: usize) -> f64 {
        self.values[(person * self.n_draws + draw) * self.n_dims + dim]
    }

    /// All draws of one person, `[draw][dim]` row-major.
    #[inline]
    pub fn person(&self, person: usize) -> &[f64] {
        let w = self.n_draws * self.n_dims;
        &self.values[person * w..(person + 1) * w]
    }

    /// Export as `person,draw,dim,value` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DrawError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["person", "draw", "dim", "value"])?;
        for p in 0..self.n_persons {
            for r in 0..self.n_draws {
                for d in 0..self.n_dims {
                    wtr.write_record([
                        p.to_string(),
                        r.to_string(),
                        d.to_string(),
                        self.get(p, r, d).to_string(),
                    ])?;
                }
            }
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn mlhs(
    n_persons: usize,
    n_draws: usize,
    n_dims: usize,
    seed: u64,
) -> Result<DrawBlock, DrawError> {
    if n_persons == 0 || n_draws == 0 || n_dims == 0 {
        return Err(DrawError::ZeroCount);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; n_persons * n_draws * n_dims];
    let mut strata = vec![0.0; n_draws];
    let scale = n_draws as f64;
    for p in 0..n_persons {
        for d in 0..n_dims {
            let u: f64 = Open01.sample(&mut rng);
            for (i, s) in strata.iter_mut().enumerate() {
                *s = ((i as f64 + u) / scale).min(BELOW_ONE);
            }
            strata.shuffle(&mut rng);
            for (r, &s) in strata.iter().enumerate() {
                values[(p * n_draws + r) * n_dims + d] = s;
            }
        }
    }
    Ok(DrawBlock {
        values,
        n_persons,
        n_draws,
        n_dims,
        kind: DrawKind::Uniform01,
        seed,
    })
}

pub fn to_std_normal(block: &DrawBlock) -> Result<DrawBlock, DrawError> {
    if block.kind != DrawKind::Uniform01 {
        return Err(DrawError::WrongKind {
            expected: DrawKind::Uniform01,
            found: block.kind,
        });
    }
    Ok(DrawBlock {
        values: block
            .values
            .iter()
            .map(|&u| inverse_normal_cdf(u))
            .collect(),
        n_persons: block.n_persons,
        n_draws: block.n_draws,
        n_dims: block.n_dims,
        kind: DrawKind::StdNormal,
        seed: block.seed,
    })
}

/// Inputs are clamped to this distance from 0 and 1.
pub const PROB_CLAMP: f64 = 1e-12;

/// Inverse standard-normal CDF (Wichura's AS241, PPND16).
///
/// Relative accuracy is about 1e-16 over the clamped range
/// `[1e-12, 1 - 1e-12]`.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        r -= 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

#[inline]
fn poly(coef: &[f64; 8], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

// AS241 coefficients, kept at their published precision.
#[allow(clippy::excessive_precision)]
const A: [f64; 8] = [
    3.387_132_872_796_366_608,
    133.141_667_891_784_377_45,
    1_971.590_950_306_551_442_7,
    13_731.693_765_509_461_125,
    45_921.953_931_549_871_457,
    67_265.770_927_008_700_853,
    33_430.575_583_588_128_105,
    2_509.080_928_730_122_672_7,
];
#[allow(clippy::excessive_precision)]
const B: [f64; 8] = [
    1.0,
    42.313_330_701_600_911_252,
    687.187_007_492_057_908_3,
    5_394.196_021_424_751_107_7,
    21_213.794_301_586_595_867,
    39_307.895_800_092_710_61,
    28_729.085_735_721_942_674,
    5_226.495_278_852_854_561,
];
#[allow(clippy::excessive_precision)]
const C: [f64; 8] = [
    1.423_437_110_749_683_577_34,
    4.630_337_846_156_545_295_9,
    5.769_497_221_460_691_405_5,
    3.647_848_324_763_204_605_04,
    1.270_458_252_452_368_382_58,
    0.241_780_725_177_450_611_77,
    0.022_723_844_989_269_184_583_3,
    7.745_450_142_783_414_076_4e-4,
];
#[allow(clippy::excessive_precision)]
const D: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_821_87,
    1.676_384_830_183_803_849_4,
    0.689_767_334_985_100_004_55,
    0.148_103_976_427_480_074_59,
    0.015_198_666_563_616_457_196_6,
    5.475_938_084_995_344_946e-4,
    1.050_750_071_644_416_843_24e-9,
];
#[allow(clippy::excessive_precision)]
const E: [f64; 8] = [
    6.657_904_643_501_103_777_2,
    5.463_784_911_164_114_369_9,
    1.784_826_539_917_291_335_8,
    0.296_560_571_828_504_891_23,
    0.026_532_189_526_576_123_093,
    0.001_242_660_947_388_078_438_6,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
#[allow(clippy::excessive_precision)]
const F: [f64; 8] = [
    1.0,
    0.599_832_206_555_887_937_69,
    0.136_929_880_922_735_805_31,
    0.014_875_361_290_850_614_852_5,
    7.868_691_311_456_132_591e-4,
    1.846_318_317_510_054_681_8e-5,
    1.421_511_758_316_445_888_7e-7,
    2.044_263_103_389_939_785_64e-15,
];
