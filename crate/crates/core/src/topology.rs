//! Winding numbers between ego trajectories and obstacle predictions, and
//! the passing-label signatures that distinguish avoidance strategies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::prediction::GaussianPrediction;
use crate::{Error, Result, Vec2};

/// How the ego trajectory passes one obstacle.
///
/// Convention: the winding number accumulates the rotation of the bearing
/// from the obstacle to the ego. A counter-clockwise sweep (positive
/// winding) means the obstacle stays on the ego's left, so the ego passes
/// with the obstacle on its left; `Left` labels that maneuver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PassingLabel {
    Left,
    Right,
    NonPassing,
}

/// Per-obstacle passing labels plus the raw winding values [revolutions].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TopologySignature {
    pub labels: BTreeMap<u32, PassingLabel>,
    pub winding: BTreeMap<u32, f64>,
}

impl TopologySignature {
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Compact display form, e.g. `0:L 2:R 3:N`.
    pub fn describe(&self) -> String {
        self.labels
            .iter()
            .map(|(id, l)| {
                let c = match l {
                    PassingLabel::Left => 'L',
                    PassingLabel::Right => 'R',
                    PassingLabel::NonPassing => 'N',
                };
                format!("{id}:{c}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Signatures are interchangeable iff they label every obstacle identically.
impl PartialEq for TopologySignature {
    fn eq(&self, other: &Self) -> bool {
        self.labels == other.labels
    }
}
impl Eq for TopologySignature {}

/// Wrap an angle increment to `(-pi, pi]`.
fn wrap_increment(d: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let r = d.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r - two_pi
    } else {
        r
    }
}

/// Accumulated rotation [revolutions] of the relative bearing
/// `ego_k - obs_k` along two equally sampled trajectories. Positive means
/// counter-clockwise relative rotation.
pub fn winding_number(ego: &[Vec2], obs: &[Vec2]) -> Result<f64> {
    if ego.len() != obs.len() {
        return Err(Error::InvalidInput(format!(
            "trajectory lengths differ: {} vs {}",
            ego.len(),
            obs.len()
        )));
    }
    if ego.len() < 2 {
        return Err(Error::InvalidInput(
            "winding number needs at least 2 samples".to_string(),
        ));
    }
    let mut total = 0.0;
    let mut prev_angle = None;
    for (k, (e, o)) in ego.iter().zip(obs.iter()).enumerate() {
        let rel = e - o;
        if rel.norm() == 0.0 {
            return Err(Error::DegenerateGeometry(format!(
                "ego and obstacle coincide at step {k}"
            )));
        }
        let angle = rel.y.atan2(rel.x);
        if let Some(prev) = prev_angle {
            total += wrap_increment(angle - prev);
        }
        prev_angle = Some(angle);
    }
    Ok(total / std::f64::consts::TAU)
}

/// Per-obstacle winding numbers against prediction means, thresholded into
/// passing labels at `theta_pass` revolutions. Coincident samples are
/// retried once with a tiny deterministic inflation.
pub fn passing_signature(
    ego: &[Vec2],
    predictions: &[GaussianPrediction],
    theta_pass: f64,
) -> Result<TopologySignature> {
    let mut sig = TopologySignature::default();
    for pred in predictions {
        let means = &pred.means[..ego.len().min(pred.means.len())];
        let ego_slice = &ego[..means.len()];
        let w = match winding_number(ego_slice, means) {
            Ok(w) => w,
            Err(Error::DegenerateGeometry(_)) => {
                let nudged: Vec<Vec2> =
                    means.iter().map(|m| m + Vec2::new(1e-6, 1e-6)).collect();
                winding_number(ego_slice, &nudged)?
            }
            Err(e) => return Err(e),
        };
        let label = if w >= theta_pass {
            PassingLabel::Left
        } else if w <= -theta_pass {
            PassingLabel::Right
        } else {
            PassingLabel::NonPassing
        };
        sig.labels.insert(pred.obstacle_id, label);
        sig.winding.insert(pred.obstacle_id, w);
    }
    Ok(sig)
}

/// True iff the two signatures label every obstacle identically.
pub fn equivalent(a: &TopologySignature, b: &TopologySignature) -> Result<bool> {
    if a.labels.len() != b.labels.len()
        || a.labels.keys().zip(b.labels.keys()).any(|(x, y)| x != y)
    {
        return Err(Error::InvalidInput(
            "signatures cover different obstacle sets".to_string(),
        ));
    }
    Ok(a.labels == b.labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prediction::{propagate_cv, ObstacleState};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense angle-integration oracle: re-sample both trajectories with many
    /// linear substeps and accumulate unwrapped increments.
    fn winding_oracle(ego: &[Vec2], obs: &[Vec2], substeps: usize) -> f64 {
        let mut total = 0.0;
        let mut prev: Option<f64> = None;
        for k in 0..ego.len() - 1 {
            for j in 0..substeps {
                let a = j as f64 / substeps as f64;
                let e = ego[k] + (ego[k + 1] - ego[k]) * a;
                let o = obs[k] + (obs[k + 1] - obs[k]) * a;
                let rel = e - o;
                let ang = rel.y.atan2(rel.x);
                if let Some(p) = prev {
                    total += wrap_increment(ang - p);
                }
                prev = Some(ang);
            }
        }
        let rel = ego[ego.len() - 1] - obs[obs.len() - 1];
        total += wrap_increment(rel.y.atan2(rel.x) - prev.unwrap());
        total / std::f64::consts::TAU
    }

    fn line(from: Vec2, to: Vec2, n: usize) -> Vec<Vec2> {
        (0..=n)
            .map(|k| from + (to - from) * (k as f64 / n as f64))
            .collect()
    }

    #[test]
    fn both_stationary_zero_winding() {
        let ego = vec![Vec2::new(0.0, 0.0); 5];
        let obs = vec![Vec2::new(3.0, 1.0); 5];
        assert_abs_diff_eq!(winding_number(&ego, &obs).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn straight_passage_with_obstacle_on_left() {
        // Ego drives +x along y = -2; the obstacle sits above the path (on
        // the ego's left), so the bearing sweeps counter-clockwise.
        let ego = line(Vec2::new(0.0, -2.0), Vec2::new(8.0, -2.0), 16);
        let obs = vec![Vec2::new(4.0, 0.0); 17];
        let w = winding_number(&ego, &obs).unwrap();
        let oracle = winding_oracle(&ego, &obs, 10_000);
        assert_abs_diff_eq!(w, oracle, epsilon = 1e-6);
        // Exact sweep: atan2(-2, 4) - atan2(-2, -4) = 2.2143 rad = 0.3524 rev.
        assert_abs_diff_eq!(w, 0.352416382349567, epsilon = 1e-9);
        assert!(w > 0.0);
    }

    #[test]
    fn full_circle_winds_once() {
        let n = 64;
        let ego: Vec<Vec2> = (0..=n)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / n as f64;
                Vec2::new(3.0 * a.cos(), 3.0 * a.sin())
            })
            .collect();
        let obs = vec![Vec2::zeros(); n + 1];
        assert_abs_diff_eq!(winding_number(&ego, &obs).unwrap(), 1.0, epsilon = 1e-9);
        let ego_cw: Vec<Vec2> = ego.iter().map(|p| Vec2::new(p.x, -p.y)).collect();
        assert_abs_diff_eq!(winding_number(&ego_cw, &obs).unwrap(), -1.0, epsilon = 1e-9);
    }

    #[test]
    fn coincident_positions_are_degenerate() {
        let ego = line(Vec2::new(0.0, 0.0), Vec2::new(4.0, 0.0), 4);
        let obs = vec![Vec2::new(2.0, 0.0); 5]; // ego hits it at step 2
        assert!(matches!(
            winding_number(&ego, &obs),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    fn prediction_from(points: Vec<Vec2>, id: u32) -> GaussianPrediction {
        let v = (points[1] - points[0]) / 0.2;
        let mut pred = propagate_cv(
            &ObstacleState::deterministic(id, points[0], v, 0.3),
            0.0,
            0.2,
            points.len() - 1,
        )
        .unwrap();
        pred.means = points;
        pred
    }

    #[test]
    fn far_lateral_obstacle_is_non_passing() {
        let ego = line(Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0), 20);
        let obs = prediction_from(vec![Vec2::new(5.0, 50.0); 21], 0);
        let sig = passing_signature(&ego, &[obs], 0.25).unwrap();
        assert_eq!(sig.labels[&0], PassingLabel::NonPassing);
        assert!(sig.winding[&0].abs() < 0.05);
    }

    #[test]
    fn overtake_labels_follow_side() {
        // Obstacle on the ego's left while passing -> Left.
        let ego = line(Vec2::new(0.0, -1.0), Vec2::new(12.0, -1.0), 24);
        let left_obs = prediction_from(vec![Vec2::new(6.0, 0.5); 25], 0);
        let sig = passing_signature(&ego, &[left_obs], 0.25).unwrap();
        assert_eq!(sig.labels[&0], PassingLabel::Left);

        // Mirror the geometry -> Right.
        let ego_m = line(Vec2::new(0.0, 1.0), Vec2::new(12.0, 1.0), 24);
        let right_obs = prediction_from(vec![Vec2::new(6.0, -0.5); 25], 0);
        let sig = passing_signature(&ego_m, &[right_obs], 0.25).unwrap();
        assert_eq!(sig.labels[&0], PassingLabel::Right);
    }

    #[test]
    fn empty_prediction_list_gives_empty_signature() {
        let ego = line(Vec2::zeros(), Vec2::new(5.0, 0.0), 10);
        let sig = passing_signature(&ego, &[], 0.25).unwrap();
        assert!(sig.is_empty());
    }

    #[test]
    fn signature_equivalence_semantics() {
        let mut a = TopologySignature::default();
        let mut b = TopologySignature::default();
        a.labels.insert(0, PassingLabel::Left);
        a.labels.insert(1, PassingLabel::NonPassing);
        b.labels.insert(0, PassingLabel::Left);
        b.labels.insert(1, PassingLabel::NonPassing);
        assert!(equivalent(&a, &b).unwrap());

        b.labels.insert(1, PassingLabel::Left);
        assert!(!equivalent(&a, &b).unwrap());

        // Left vs NonPassing counts as distinct.
        b.labels.insert(1, PassingLabel::NonPassing);
        b.labels.insert(0, PassingLabel::NonPassing);
        assert!(!equivalent(&a, &b).unwrap());

        let mut c = TopologySignature::default();
        c.labels.insert(7, PassingLabel::Left);
        assert!(equivalent(&a, &c).is_err());
    }

    fn random_trajectory(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec2> {
        let mut p = Vec2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let mut out = vec![p];
        for _ in 0..n {
            p += Vec2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            out.push(p);
        }
        out
    }

    #[test]
    fn antisymmetry_rigid_motion_and_refinement_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 1000 {
            let ego = random_trajectory(&mut rng, 20);
            let obs: Vec<Vec2> = random_trajectory(&mut rng, 20)
                .iter()
                .map(|p| p + Vec2::new(11.0, 0.0))
                .collect();
            let w = match winding_number(&ego, &obs) {
                Ok(w) => w,
                Err(_) => continue,
            };

            // Swapping the roles shifts every bearing by pi, which leaves
            // the increments unchanged: the winding number is symmetric.
            let w_swapped = winding_number(&obs, &ego).unwrap();
            assert!((w - w_swapped).abs() < 1e-9);

            // Antisymmetry under time reversal and under mirror reflection.
            let rev = |t: &[Vec2]| t.iter().rev().copied().collect::<Vec<_>>();
            let w_rev = winding_number(&rev(&ego), &rev(&obs)).unwrap();
            assert!((w + w_rev).abs() < 1e-9);
            let mirror = |t: &[Vec2]| {
                t.iter().map(|p| Vec2::new(p.x, -p.y)).collect::<Vec<_>>()
            };
            let w_mir = winding_number(&mirror(&ego), &mirror(&obs)).unwrap();
            assert!((w + w_mir).abs() < 1e-9);

            // Rigid motion invariance.
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let shift = Vec2::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
            let rot = |p: &Vec2| {
                Vec2::new(
                    p.x * angle.cos() - p.y * angle.sin(),
                    p.x * angle.sin() + p.y * angle.cos(),
                ) + shift
            };
            let ego_r: Vec<Vec2> = ego.iter().map(rot).collect();
            let obs_r: Vec<Vec2> = obs.iter().map(rot).collect();
            assert!((winding_number(&ego_r, &obs_r).unwrap() - w).abs() < 1e-9);

            // Midpoint refinement invariance.
            let refine = |t: &[Vec2]| {
                let mut out = Vec::with_capacity(t.len() * 2 - 1);
                for k in 0..t.len() - 1 {
                    out.push(t[k]);
                    out.push((t[k] + t[k + 1]) * 0.5);
                }
                out.push(t[t.len() - 1]);
                out
            };
            assert!((winding_number(&refine(&ego), &refine(&obs)).unwrap() - w).abs() < 1e-9);
            checked += 1;
        }
    }

    proptest! {
        /// Labels are a trichotomy and equivalence is reflexive/symmetric.
        #[test]
        fn label_trichotomy_and_equivalence_relation(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ego = random_trajectory(&mut rng, 15);
            let preds: Vec<GaussianPrediction> = (0..3)
                .map(|id| {
                    let start = Vec2::new(rng.gen_range(6.0..12.0), rng.gen_range(-3.0..3.0));
                    let vel = Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                    propagate_cv(
                        &ObstacleState::deterministic(id, start, vel, 0.3),
                        0.0,
                        0.2,
                        15,
                    )
                    .unwrap()
                })
                .collect();
            let sig = passing_signature(&ego, &preds, 0.25).unwrap();
            prop_assert_eq!(sig.labels.len(), 3);
            for (id, w) in &sig.winding {
                let label = sig.labels[id];
                let expected = if *w >= 0.25 {
                    PassingLabel::Left
                } else if *w <= -0.25 {
                    PassingLabel::Right
                } else {
                    PassingLabel::NonPassing
                };
                prop_assert_eq!(label, expected);
            }
            prop_assert!(equivalent(&sig, &sig).unwrap());
            let sig2 = passing_signature(&ego, &preds, 0.25).unwrap();
            prop_assert_eq!(equivalent(&sig, &sig2).unwrap(), equivalent(&sig2, &sig).unwrap());
        }
    }
}
