//! Three-dimensional rotary position embeddings.
//!
//! Every frequency band `k` owns a unit axis `d_k ∈ S²` and a frequency
//! `ω_k`; a token at normalized position `p = (t, h, w)` has the coordinate
//! pair `(2k, 2k+1)` of its query/key rotated by `θ = ω_k ⟨d_k, p⟩`. Axes
//! come from a seeded low-discrepancy sequence on the sphere, frequencies are
//! log-spaced, and a fraction of the bands is left unrotated.

use std::fmt::Write as _;
use std::ops::Sub;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::RngStream;

/// Plastic number, the unique real root of `x³ = x + 1`.
const PLASTIC: f64 = 1.324_717_957_244_746;

pub type Axis = [f64; 3];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Position3 {
    pub t: f64,
    pub h: f64,
    pub w: f64,
}

impl Position3 {
    pub fn new(t: f64, h: f64, w: f64) -> Self {
        Self { t, h, w }
    }

    fn dot(&self, axis: &Axis) -> f64 {
        axis[0] * self.t + axis[1] * self.h + axis[2] * self.w
    }
}

impl Sub for Position3 {
    type Output = Position3;

    fn sub(self, o: Position3) -> Position3 {
        Position3::new(self.t - o.t, self.h - o.h, self.w - o.w)
    }
}

/// Token positions of an `nt x nh x nw` grid, each axis scaled to `[0, 1]`,
/// in t-major order.
pub fn grid_positions(nt: usize, nh: usize, nw: usize) -> Vec<Position3> {
    let norm = |i: usize, n: usize| {
        if n > 1 {
            i as f64 / (n - 1) as f64
        } else {
            0.0
        }
    };
    let mut out = Vec::with_capacity(nt * nh * nw);
    for t in 0..nt {
        for h in 0..nh {
            for w in 0..nw {
                out.push(Position3::new(norm(t, nt), norm(h, nh), norm(w, nw)));
            }
        }
    }
    out
}

/// `n` unit vectors covering the sphere with low discrepancy.
///
/// Uses the two-dimensional Kronecker sequence with plastic-number basis
/// pushed through the area-preserving cylinder map, then a seed-dependent
/// shift and rotation so that different seeds give different point sets.
pub fn sample_axes(n: usize, seed: u64) -> Vec<Axis> {
    let mut rng = RngStream::new(seed);
    let shift = [rng.uniform(), rng.uniform()];
    let rot = random_rotation(&mut rng);
    let alpha = [1.0 / PLASTIC, 1.0 / (PLASTIC * PLASTIC)];
    (0..n)
        .map(|i| {
            let k = (i + 1) as f64;
            let u = (0.5 + shift[0] + k * alpha[0]).fract();
            let v = (0.5 + shift[1] + k * alpha[1]).fract();
            let z = 1.0 - 2.0 * u;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = 2.0 * std::f64::consts::PI * v;
            let p = [r * phi.cos(), r * phi.sin(), z];
            let mut q = [0.0; 3];
            for (a, row) in q.iter_mut().zip(&rot) {
                *a = row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
            }
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
            [q[0] / n, q[1] / n, q[2] / n]
        })
        .collect()
}

/// Rotation matrix from a uniformly random unit quaternion.
fn random_rotation(rng: &mut RngStream) -> [[f64; 3]; 3] {
    let mut q = [0.0; 4];
    loop {
        for x in q.iter_mut() {
            *x = rng.normal();
        }
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            q.iter_mut().for_each(|x| *x /= n);
            break;
        }
    }
    let [a, b, c, d] = q;
    [
        [
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
        ],
        [
            2.0 * (b * c + a * d),
            a * a - b * b + c * c - d * d,
            2.0 * (c * d - a * b),
        ],
        [
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a - b * b - c * c + d * d,
        ],
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqConfig {
    pub omega_min: f64,
    pub omega_max: f64,
    pub zero_fraction: f64,
}

impl Default for FreqConfig {
    fn default() -> Self {
        Self {
            omega_min: 0.2,
            omega_max: 50.0,
            zero_fraction: 0.1,
        }
    }
}

/// Number of bands left unrotated: `⌈zero_fraction · n⌉`.
pub fn zero_band_count(n_bands: usize, zero_fraction: f64) -> usize {
    // tolerance keeps products such as 0.1 * 30 = 3.0000000000000004 from rounding up
    let raw = zero_fraction * n_bands as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n_bands)
}

/// Log-spaced frequencies from `omega_min` to `omega_max` (both included)
/// followed by `⌈zero_fraction · n⌉` zeroed bands.
pub fn build_freqs(
    n_bands: usize,
    omega_min: f64,
    omega_max: f64,
    zero_fraction: f64,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if !(0.0..1.0).contains(&zero_fraction) {
        return Err(Error::contract(format!(
            "zero_fraction must be in [0, 1), got {zero_fraction}"
        )));
    }
    if !(omega_min > 0.0 && omega_min < omega_max && omega_max.is_finite()) {
        return Err(Error::contract(format!(
            "need 0 < omega_min < omega_max, got {omega_min}, {omega_max}"
        )));
    }
    let zeros = zero_band_count(n_bands, zero_fraction);
    let active = n_bands - zeros;
    let ratio = omega_max / omega_min;
    let mut freqs = Vec::with_capacity(n_bands);
    for k in 0..active {
        let f = match k {
            0 => omega_min,
            _ if k == active - 1 => omega_max,
            _ => omega_min * ratio.powf(k as f64 / (active - 1) as f64),
        };
        freqs.push(f);
    }
    let mut mask = vec![false; active];
    freqs.resize(n_bands, 0.0);
    mask.resize(n_bands, true);
    Ok((freqs, mask))
}

/// Rotation angle `ω ⟨axis, p⟩`.
pub fn angle(axis: &Axis, omega: f64, p: &Position3) -> f64 {
    omega * p.dot(axis)
}

/// Axes, frequencies and zero mask for one attention head of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeLayerSpec {
    pub axes: Vec<Axis>,
    pub freqs: Vec<f64>,
    pub zero_mask: Vec<bool>,
    pub seed: u64,
}

impl RopeLayerSpec {
    pub fn new(n_bands: usize, seed: u64, cfg: &FreqConfig) -> Result<Self> {
        let (freqs, zero_mask) =
            build_freqs(n_bands, cfg.omega_min, cfg.omega_max, cfg.zero_fraction)?;
        Ok(Self {
            axes: sample_axes(n_bands, seed),
            freqs,
            zero_mask,
            seed,
        })
    }

    /// Every band masked: `apply_rope` is the identity.
    pub fn identity(n_bands: usize) -> Self {
        Self {
            axes: vec![[1.0, 0.0, 0.0]; n_bands],
            freqs: vec![0.0; n_bands],
            zero_mask: vec![true; n_bands],
            seed: 0,
        }
    }

    pub fn n_bands(&self) -> usize {
        self.freqs.len()
    }
}

fn rotate(x: &[f64], spec: &RopeLayerSpec, p: &Position3, sign: f64) -> Result<Vec<f64>> {
    if x.len() != 2 * spec.n_bands() {
        return Err(Error::shape(
            "apply_rope vector length",
            2 * spec.n_bands(),
            x.len(),
        ));
    }
    let mut out = x.to_vec();
    for k in 0..spec.n_bands() {
        if spec.zero_mask[k] {
            continue;
        }
        let theta = sign * angle(&spec.axes[k], spec.freqs[k], p);
        let (s, c) = theta.sin_cos();
        let (a, b) = (x[2 * k], x[2 * k + 1]);
        out[2 * k] = a * c - b * s;
        out[2 * k + 1] = a * s + b * c;
    }
    Ok(out)
}

/// Rotates each pair `(2k, 2k+1)` by `angle(axis_k, ω_k, p)`; masked bands are untouched.
pub fn apply_rope(x: &[f64], spec: &RopeLayerSpec, p: &Position3) -> Result<Vec<f64>> {
    rotate(x, spec, p, 1.0)
}

/// Inverse (= transpose) of [`apply_rope`].
pub fn apply_rope_inverse(x: &[f64], spec: &RopeLayerSpec, p: &Position3) -> Result<Vec<f64>> {
    rotate(x, spec, p, -1.0)
}

/// Per-head RoPE specs of one transformer layer.
///
/// Axes for all head–frequency pairs are drawn as one sequence from the
/// layer seed, so the whole layer covers the sphere evenly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeLayer {
    pub heads: Vec<RopeLayerSpec>,
}

impl RopeLayer {
    pub fn new(n_heads: usize, head_dim: usize, seed: u64, cfg: &FreqConfig) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::contract(format!(
                "head_dim must be even and positive, got {head_dim}"
            )));
        }
        let bands = head_dim / 2;
        let (freqs, zero_mask) =
            build_freqs(bands, cfg.omega_min, cfg.omega_max, cfg.zero_fraction)?;
        let axes = sample_axes(n_heads * bands, seed);
        let heads = axes
            .chunks(bands)
            .map(|chunk| RopeLayerSpec {
                axes: chunk.to_vec(),
                freqs: freqs.clone(),
                zero_mask: zero_mask.clone(),
                seed,
            })
            .collect();
        Ok(Self { heads })
    }

    pub fn identity(n_heads: usize, head_dim: usize) -> Self {
        Self {
            heads: vec![RopeLayerSpec::identity(head_dim / 2); n_heads],
        }
    }

    /// CSV with header `band,x,y,z,omega,masked`; `band` numbers head–frequency pairs.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("band,x,y,z,omega,masked\n");
        let mut band = 0;
        for head in &self.heads {
            for k in 0..head.n_bands() {
                let a = head.axes[k];
                let _ = writeln!(
                    out,
                    "{band},{},{},{},{},{}",
                    a[0], a[1], a[2], head.freqs[k], head.zero_mask[k]
                );
                band += 1;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngCore;

    fn norm3(a: &Axis) -> f64 {
        (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
    }

    #[test]
    fn single_axis_is_unit() {
        let a = sample_axes(1, 9);
        assert_eq!(a.len(), 1);
        assert!((norm3(&a[0]) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn axes_are_deterministic() {
        assert_eq!(sample_axes(50, 3), sample_axes(50, 3));
        assert_ne!(sample_axes(50, 3), sample_axes(50, 4));
    }

    #[test]
    fn freq_examples() {
        let (f, m) = build_freqs(2, 0.2, 50.0, 0.0).unwrap();
        assert_eq!(f, vec![0.2, 50.0]);
        assert_eq!(m, vec![false, false]);

        let (f, m) = build_freqs(10, 0.2, 50.0, 0.1).unwrap();
        assert_eq!(m.iter().filter(|&&z| z).count(), 1);
        assert_eq!(f[9], 0.0);
        assert_eq!((f[0], f[8]), (0.2, 50.0));

        // 0.2·250^{1/3} = 1.2599210498948731648, 0.2·250^{2/3} = 7.9370052598409973738
        let (f, _) = build_freqs(4, 0.2, 50.0, 0.0).unwrap();
        assert!((f[1] - 1.259_921_049_894_873_2).abs() < 1e-14);
        assert!((f[2] - 7.937_005_259_840_997).abs() < 1e-13);
    }

    #[test]
    fn zero_band_counts() {
        assert_eq!(zero_band_count(10, 0.1), 1);
        assert_eq!(zero_band_count(16, 0.1), 2);
        assert_eq!(zero_band_count(64, 0.1), 7);
        assert_eq!(zero_band_count(30, 0.1), 3);
        assert_eq!(zero_band_count(8, 0.0), 0);
    }

    #[test]
    fn bad_freq_config() {
        assert!(build_freqs(4, 0.2, 50.0, 1.0).is_err());
        assert!(build_freqs(4, 5.0, 1.0, 0.1).is_err());
        assert!(build_freqs(4, 0.0, 1.0, 0.1).is_err());
    }

    #[test]
    fn angle_examples() {
        let p = Position3::new(2.0, 5.0, 7.0);
        assert!((angle(&[1.0, 0.0, 0.0], 0.2, &p) - 0.4).abs() < 1e-15);
        assert_eq!(angle(&sample_axes(1, 0)[0], 0.0, &p), 0.0);
        let mut rng = RngStream::new(12);
        for _ in 0..100 {
            let ax = sample_axes(1, rng.next_u64())[0];
            let om = rng.uniform() * 50.0;
            let q = Position3::new(rng.normal(), rng.normal(), rng.normal());
            let direct = om * (ax[0] * q.t + ax[1] * q.h + ax[2] * q.w);
            assert!((angle(&ax, om, &q) - direct).abs() <= 1e-15 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn quarter_turn_and_identity() {
        let spec = RopeLayerSpec {
            axes: vec![[1.0, 0.0, 0.0]],
            freqs: vec![1.0],
            zero_mask: vec![false],
            seed: 0,
        };
        let out = apply_rope(
            &[1.0, 0.0],
            &spec,
            &Position3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0),
        )
        .unwrap();
        assert!(out[0].abs() <= 1e-15 && (out[1] - 1.0).abs() <= 1e-15);

        let id = RopeLayerSpec::identity(3);
        let x = [1.5, -2.0, 0.25, 9.0, -1e-3, 4.0];
        let y = apply_rope(&x, &id, &Position3::new(3.0, 1.0, 2.0)).unwrap();
        assert_eq!(y, x);
        assert!(apply_rope(&x[..5], &id, &Position3::default()).is_err());
    }

    #[test]
    fn masked_bands_are_bitwise_identity() {
        let spec = RopeLayerSpec::new(10, 5, &FreqConfig::default()).unwrap();
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = apply_rope(&x, &spec, &Position3::new(0.3, 0.9, 0.1)).unwrap();
        assert_eq!(y[18].to_bits(), x[18].to_bits());
        assert_eq!(y[19].to_bits(), x[19].to_bits());
    }

    #[test]
    fn layers_with_different_seeds_share_no_axis() {
        let a = RopeLayer::new(4, 16, 100, &FreqConfig::default()).unwrap();
        let b = RopeLayer::new(4, 16, 101, &FreqConfig::default()).unwrap();
        let mut max_dot = f64::MIN;
        for ha in &a.heads {
            for hb in &b.heads {
                for x in &ha.axes {
                    for y in &hb.axes {
                        max_dot = max_dot.max(x[0] * y[0] + x[1] * y[1] + x[2] * y[2]);
                    }
                }
            }
        }
        assert!(max_dot < 1.0 - 1e-6);
    }

    #[test]
    fn csv_dump_shape() {
        let layer = RopeLayer::new(2, 8, 1, &FreqConfig::default()).unwrap();
        let csv = layer.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "band,x,y,z,omega,masked");
        assert_eq!(lines.len(), 1 + 8);
        assert!(lines[4].ends_with(",0,true"));
    }

    #[test]
    fn grid_is_normalized() {
        let g = grid_positions(21, 11, 20);
        assert_eq!(g.len(), 4620);
        assert_eq!(g[0], Position3::new(0.0, 0.0, 0.0));
        assert_eq!(g[4619], Position3::new(1.0, 1.0, 1.0));
        assert_eq!(grid_positions(1, 1, 1)[0], Position3::default());
    }

    proptest! {
        #[test]
        fn rotation_preserves_pair_norms(seed in any::<u64>()) {
            let spec = RopeLayerSpec::new(8, seed, &FreqConfig::default()).unwrap();
            let mut rng = RngStream::new(seed);
            let x: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
            let p = Position3::new(rng.uniform(), rng.uniform(), rng.uniform());
            let y = apply_rope(&x, &spec, &p).unwrap();
            for k in 0..8 {
                let a = (x[2 * k].powi(2) + x[2 * k + 1].powi(2)).sqrt();
                let b = (y[2 * k].powi(2) + y[2 * k + 1].powi(2)).sqrt();
                prop_assert!((a - b).abs() <= 1e-12);
            }
            let back = apply_rope_inverse(&y, &spec, &p).unwrap();
            for (u, v) in x.iter().zip(&back) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }
    }
}
