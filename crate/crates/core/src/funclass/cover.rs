//! Covers in the max-over-levels sup-norm.
//!
//! A product of per-level covers is a cover of the product class under the
//! metric `max_h |f_h - f'_h|_inf`, so every cover here is built level by
//! level.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{map_level, sup_distance, FiniteClass, LevelMember, LinearClass};
use crate::error::{Error, Result};
use crate::mdp::LayeredMdp;

/// Largest grid a linear cover may enumerate per level.
pub const GRID_CAP: usize = 2_000_000;

/// One checked point: a class member (finite case) or a parameter vector
/// (linear case), its nearest cover element and the sup-norm distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    pub nearest: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverCertificate {
    pub epsilon: f64,
    /// `[h]` entries for every checked point of level `h`.
    pub levels: Vec<Vec<CertEntry>>,
}

impl CoverCertificate {
    /// Every recorded distance is within `epsilon`.
    pub fn holds(&self) -> bool {
        self.levels.iter().flatten().all(|e| e.distance <= self.epsilon)
    }

    /// Recomputes every recorded distance of a finite-class certificate.
    pub fn verify_finite(&self, class: &FiniteClass, cover: &FiniteClass) -> bool {
        self.holds()
            && self.levels.iter().enumerate().all(|(h, entries)| {
                entries.len() == class.level_size(h)
                    && entries.iter().all(|e| {
                        e.member.is_some_and(|m| {
                            let d = sup_distance(&class.level_members(h)[m].values, &cover.level_members(h)[e.nearest].values);
                            d == e.distance
                        })
                    })
            })
    }

    /// Largest recorded distance.
    pub fn max_distance(&self) -> f64 {
        self.levels.iter().flatten().map(|e| e.distance).fold(0.0, f64::max)
    }
}

/// Greedy per-level cover of a finite class (zero first, then members in
/// order, adding any member farther than `eps` from every chosen centre).
///
/// With `eps = 0` the cover keeps every distinct member.
pub fn cover_finite(mdp: &LayeredMdp, class: &FiniteClass, eps: f64) -> Result<(FiniteClass, CoverCertificate)> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidInput("cover radius must be non-negative".into()));
    }
    let mut levels = Vec::with_capacity(class.horizon());
    let mut cert = Vec::with_capacity(class.horizon());
    for h in 0..class.horizon() {
        let members = class.level_members(h);
        let mut centres: Vec<usize> = Vec::new();
        let mut entries = Vec::with_capacity(members.len());
        for (i, m) in members.iter().enumerate() {
            let nearest = centres
                .iter()
                .enumerate()
                .map(|(k, &c)| (k, sup_distance(&members[c].values, &m.values)))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match nearest {
                Some((k, d)) if d <= eps => entries.push(CertEntry { member: Some(i), theta: None, nearest: k, distance: d }),
                _ => {
                    entries.push(CertEntry { member: Some(i), theta: None, nearest: centres.len(), distance: 0.0 });
                    centres.push(i);
                }
            }
        }
        levels.push(centres.iter().map(|&c| members[c].clone()).collect::<Vec<_>>());
        cert.push(entries);
    }
    let cover = FiniteClass::with_bounds(mdp, levels, Some(class.bounds().to_vec()))?;
    Ok((cover, CoverCertificate { epsilon: eps, levels: cert }))
}

/// Integer offsets `k` in `[-m, m]^d` with `|pitch * k|_2 <= radius`.
fn lattice(d: usize, pitch: f64, radius: f64) -> Result<Vec<Vec<i64>>> {
    let m = (radius / pitch + 1e-9).floor() as i64;
    let side = (2 * m + 1) as u128;
    if side.saturating_pow(d as u32) > GRID_CAP as u128 {
        return Err(Error::Unsupported(format!("parameter grid with {side}^{d} points exceeds the cap")));
    }
    let mut out = Vec::new();
    let mut k = vec![-m; d];
    let r2 = radius * radius * (1.0 + 1e-12);
    loop {
        let norm2: f64 = k.iter().map(|&v| (v as f64 * pitch).powi(2)).sum();
        if norm2 <= r2 {
            out.push(k.clone());
        }
        let mut i = d;
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            k[i] += 1;
            if k[i] <= m {
                break;
            }
            k[i] = -m;
        }
    }
}

/// Grid points `pitch * k` with `|theta|_2 <= radius`, in lexicographic order.
pub fn linear_grid(d: usize, pitch: f64, radius: f64) -> Result<Vec<Vec<f64>>> {
    if !(pitch > 0.0) {
        return Err(Error::Unsupported("grid pitch must be positive".into()));
    }
    Ok(lattice(d, pitch, radius)?.into_iter().map(|k| k.iter().map(|&v| v as f64 * pitch).collect()).collect())
}

/// Grid cover of a linear class.
///
/// Level `h` uses pitch `eps / sqrt(d_h)` over the ball of radius
/// `B_h sqrt(d_h) + eps / 2` (the slack keeps the rounding of any in-ball
/// parameter on the grid). Values are clipped to `[-B_h, B_h]`, which never
/// increases a distance to an in-range function. The certificate checks a
/// verification grid at half the pitch: each point is rounded to its grid
/// neighbour and the sup-norm distance of the clipped values is recorded.
pub fn cover_linear(mdp: &LayeredMdp, class: &LinearClass, eps: f64) -> Result<(FiniteClass, CoverCertificate)> {
    if eps == 0.0 {
        return Err(Error::Unsupported("an exact cover of a linear ball class is infinite".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidInput("cover radius must be positive".into()));
    }
    let feature = &class.feature;
    let mut levels = Vec::with_capacity(feature.horizon());
    let mut cert = Vec::with_capacity(feature.horizon());
    for h in 0..feature.horizon() {
        let d = feature.dim(h);
        let b = class.bounds[h];
        let clip = |theta: &[f64]| map_level(&feature.evaluate(h, theta), |v| v.clamp(-b, b));
        let pitch = eps / (d as f64).sqrt();
        let ball = b * (d as f64).sqrt();
        let mut keys = lattice(d, pitch, ball + eps / 2.0)?;
        // The origin goes first so the zero member keeps index 0.
        keys.sort_by_key(|k| k.iter().any(|&v| v != 0));
        let index: HashMap<Vec<i64>, usize> = keys.iter().cloned().enumerate().map(|(i, k)| (k, i)).collect();
        let members: Vec<LevelMember> = keys
            .iter()
            .map(|k| {
                let theta: Vec<f64> = k.iter().map(|&v| v as f64 * pitch).collect();
                LevelMember { name: format!("theta{h}{theta:?}"), values: clip(&theta) }
            })
            .collect();

        let mut entries = Vec::new();
        for theta in linear_grid(d, pitch / 2.0, ball)? {
            let values = map_level(&feature.evaluate(h, &theta), |v| v.clamp(-b, b));
            // Only functions inside the range belong to the class.
            if feature.evaluate(h, &theta).iter().flatten().any(|v| v.abs() > b + 1e-12) {
                continue;
            }
            let key: Vec<i64> = theta.iter().map(|t| (t / pitch).round() as i64).collect();
            let nearest = match index.get(&key) {
                Some(&i) => i,
                None => members
                    .iter()
                    .enumerate()
                    .min_by(|a, c| sup_distance(&a.1.values, &values).total_cmp(&sup_distance(&c.1.values, &values)))
                    .map(|(i, _)| i)
                    .expect("non-empty grid"),
            };
            entries.push(CertEntry {
                member: None,
                distance: sup_distance(&members[nearest].values, &values),
                theta: Some(theta),
                nearest,
            });
        }
        levels.push(members);
        cert.push(entries);
    }
    // Declared bounds are the class bounds; grid members never exceed them.
    let cover = FiniteClass::with_bounds(mdp, levels, Some(class.bounds.clone()))?;
    Ok((cover, CoverCertificate { epsilon: eps, levels: cert }))
}

/// `(2 H^2 sqrt(d) / eps)^d`.
pub fn linear_cover_bound(horizon: usize, d: usize, eps: f64) -> f64 {
    (2.0 * (horizon * horizon) as f64 * (d as f64).sqrt() / eps).powi(d as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::rfolive_counterexample;
    use crate::funclass::{FunctionClass, LinearFeatureMap};
    use crate::mdp::LayeredMdp;

    fn two_pair_mdp() -> LayeredMdp {
        // One level with two state-action pairs, features 0 and 1.
        LayeredMdp::new(
            vec![vec!["s".into()], vec!["t".into()]],
            vec![2],
            None,
            vec![vec![vec![vec![1.0], vec![1.0]]]],
            0,
        )
        .unwrap()
    }

    #[test]
    fn finite_cover_at_zero_is_the_class() {
        let fx = rfolive_counterexample();
        let (cover, cert) = cover_finite(&fx.mdp, &fx.class, 0.0).unwrap();
        assert_eq!(cover, fx.class);
        assert!(cert.verify_finite(&fx.class, &cover));
    }

    #[test]
    fn finite_cover_merges_close_members() {
        let fx = rfolive_counterexample();
        let (cover, cert) = cover_finite(&fx.mdp, &fx.class, 0.1).unwrap();
        // f_R2 = (0.2, 0.1) and f_bad = (0.21, 0.3): 0.2 apart, both kept;
        // f_bad,1 is 0.1 from zero, merged.
        assert_eq!(cover.level_size(0), 4);
        assert_eq!(cover.level_size(1), 1);
        assert!(cert.verify_finite(&fx.class, &cover));
    }

    #[test]
    fn linear_cover_small_example() {
        let mdp = two_pair_mdp();
        let feature = LinearFeatureMap::new(&mdp, vec![vec![vec![vec![0.0], vec![1.0]]]]).unwrap();
        let class = LinearClass::new(feature, vec![1.0], 0.5).unwrap();
        let (cover, cert) = cover_linear(&mdp, &class, 0.5).unwrap();
        let thetas: Vec<f64> = cover.level_members(0).iter().map(|m| m.values[0][1]).collect();
        let mut sorted = thetas.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(cert.holds());
        // Exhaustive check over a fine parameter sweep.
        for i in -100..=100 {
            let t = i as f64 / 100.0;
            let best = thetas.iter().map(|c| (c - t).abs()).fold(f64::INFINITY, f64::min);
            assert!(best <= 0.5 + 1e-12);
        }
        assert!(matches!(FunctionClass::Linear(class).cover(&mdp, 0.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn lattice_counts_are_symmetric() {
        let pts = lattice(2, 1.0, 1.0).unwrap();
        assert_eq!(pts.len(), 5);
        assert!(lattice(6, 0.001, 1.0).is_err());
    }
}
