//! Turns attributed double-edge lanes into a path, a stop flag and a
//! trajectory for the controller.

use crate::loss::Prediction;
use crate::scene::{DoubleEdge, Edge, EdgePoint, SceneAnnotation, Signal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum InterpretError {
    #[error("negative speed {0}")]
    NegativeSpeed(f64),
    #[error("non-finite path point at index {0}")]
    NonFinitePath(usize),
}

/// Probabilistic scene: per-lane point coordinates with attribute
/// probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneProbabilities {
    pub lanes: Vec<LaneProbabilities>,
    pub speed: f64,
    pub signal_logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneProbabilities {
    /// Left edge first, then right edge.
    pub points: Vec<[f64; 2]>,
    pub int: f64,
    pub dir: f64,
    pub occ: Vec<f64>,
    pub plan: Vec<f64>,
}

impl SceneProbabilities {
    /// From the network's heads plus the planner's per-point output.
    pub fn from_network(pred: &Prediction) -> Self {
        let np = pred.points;
        let lanes = (0..pred.lanes)
            .map(|j| LaneProbabilities {
                points: pred.lane_points(j),
                int: pred.int[j],
                dir: pred.dir[j],
                occ: pred.occ[j * np..(j + 1) * np].to_vec(),
                plan: pred.plan[j * np..(j + 1) * np].to_vec(),
            })
            .collect();
        Self {
            lanes,
            speed: pred.speed,
            signal_logits: pred.signal.clone(),
        }
    }

    /// Certain probabilities from an already-binary scene.
    pub fn from_scene(scene: &SceneAnnotation) -> Self {
        let lanes = scene
            .lanes
            .iter()
            .map(|l| LaneProbabilities {
                points: l.points().map(EdgePoint::xy).collect(),
                int: l.intersection as f64,
                dir: l.direction as f64,
                occ: l.points().map(|p| p.occ as f64).collect(),
                plan: l.points().map(|p| p.plan as f64).collect(),
            })
            .collect();
        let mut signal_logits = vec![0.0; Signal::ALL.len()];
        signal_logits[scene.signal.class_index()] = 1.0;
        Self {
            lanes,
            speed: scene.speed,
            signal_logits,
        }
    }
}

/// Attribute is 1 iff its probability is at least `tau`.
pub fn binarize(probs: &SceneProbabilities, tau: f64) -> SceneAnnotation {
    let bit = |p: f64| u8::from(p >= tau);
    let lanes = probs
        .lanes
        .iter()
        .map(|l| {
            let half = l.points.len() / 2;
            let edge = |range: std::ops::Range<usize>| {
                Edge::new(
                    range
                        .map(|k| EdgePoint::new(l.points[k][0], l.points[k][1], bit(l.occ[k]), bit(l.plan[k])))
                        .collect(),
                )
            };
            DoubleEdge {
                left: edge(0..half),
                right: edge(half..l.points.len()),
                intersection: bit(l.int),
                direction: bit(l.dir),
            }
        })
        .collect();
    // First maximum wins on ties.
    let class = probs
        .signal_logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &z)| if z > best.1 { (i, z) } else { best })
        .0;
    SceneAnnotation {
        lanes,
        speed: probs.speed.max(0.0),
        signal: Signal::from_class_index(class).unwrap_or(Signal::None),
    }
}

fn planned_midpoints(lane: &DoubleEdge) -> Vec<[f64; 2]> {
    (0..lane.pairs())
        .filter(|&j| lane.left.points[j].plan == 1 && lane.right.points[j].plan == 1)
        .map(|j| lane.midpoint(j))
        .collect()
}

/// Midpoints of every pair whose left and right plan bits are both set.
/// Lanes are ordered by the distance of their first such midpoint from the
/// ego origin (stable), points by index within a lane.
pub fn generate_path(scene: &SceneAnnotation) -> Vec<[f64; 2]> {
    let mut per_lane: Vec<Vec<[f64; 2]>> = scene
        .lanes
        .iter()
        .map(planned_midpoints)
        .filter(|m| !m.is_empty())
        .collect();
    per_lane.sort_by(|a, b| a[0][0].hypot(a[0][1]).total_cmp(&b[0][0].hypot(b[0][1])));
    per_lane.concat()
}

/// Late fusion of occupancy, path length and the traffic signal.
pub fn stop_decision(scene: &SceneAnnotation, path: &[[f64; 2]]) -> bool {
    let blocked = scene
        .lanes
        .iter()
        .filter(|l| l.direction == 1)
        .flat_map(|l| l.points())
        .any(|p| p.plan == 1 && p.occ == 0);
    let red_junction = scene.signal == Signal::Red
        && scene
            .lanes
            .iter()
            .any(|l| l.intersection == 1 && l.points().any(|p| p.plan == 1));
    blocked || path.len() == 1 || red_junction
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub path: Vec<[f64; 2]>,
    pub speed: f64,
    pub stop: bool,
}

pub fn assemble_trajectory(path: Vec<[f64; 2]>, speed: f64, stop: bool) -> Result<Trajectory, InterpretError> {
    if !(speed >= 0.0) {
        return Err(InterpretError::NegativeSpeed(speed));
    }
    if let Some(i) = path.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(InterpretError::NonFinitePath(i));
    }
    Ok(Trajectory { path, speed, stop })
}

/// Path, stop flag and trajectory for an attributed scene.
pub fn interpret(scene: &SceneAnnotation) -> Result<Trajectory, InterpretError> {
    let path = generate_path(scene);
    let stop = stop_decision(scene, &path);
    assemble_trajectory(path, scene.speed, stop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{naive_path};
    use crate::scene::tests::{arb_scene, straight_lane};
    use proptest::prelude::*;

    fn scene_of(lanes: Vec<DoubleEdge>) -> SceneAnnotation {
        SceneAnnotation {
            lanes,
            speed: 8.0,
            signal: Signal::Green,
        }
    }

    #[test]
    fn midpoint_example() {
        let lane = DoubleEdge {
            left: Edge::new(vec![EdgePoint::new(0.0, 2.0, 1, 1)]),
            right: Edge::new(vec![EdgePoint::new(0.0, 0.0, 1, 1)]),
            intersection: 0,
            direction: 1,
        };
        assert_eq!(generate_path(&scene_of(vec![lane.clone()])), vec![[0.0, 1.0]]);
        let mut half = lane;
        half.right.points[0].plan = 0;
        assert!(generate_path(&scene_of(vec![half])).is_empty());
    }

    #[test]
    fn straight_lane_gives_collinear_midpoints() {
        let path = generate_path(&scene_of(vec![straight_lane(10, 1, 1)]));
        assert_eq!(path.len(), 10);
        assert!(path.iter().all(|p| p[1] == 0.0));
        assert!(path.windows(2).all(|w| w[1][0] > w[0][0]));
    }

    #[test]
    fn lanes_ordered_by_first_planned_midpoint() {
        let mut far = straight_lane(3, 1, 1);
        far.points_mut().for_each(|p| p.x += 20.0);
        let near = straight_lane(3, 1, 1);
        let path = generate_path(&scene_of(vec![far, near]));
        assert_eq!(path[0], [0.0, 0.0]);
        assert_eq!(path[3], [20.0, 0.0]);
    }

    #[test]
    fn stop_truth_table() {
        let mut lane = straight_lane(10, 1, 1);
        let path = generate_path(&scene_of(vec![lane.clone()]));
        assert!(!stop_decision(&scene_of(vec![lane.clone()]), &path));

        lane.left.points[4].occ = 0;
        assert!(stop_decision(&scene_of(vec![lane.clone()]), &path));
        // Same blockage on a lane against the route direction is ignored.
        lane.direction = 0;
        assert!(!stop_decision(&scene_of(vec![lane.clone()]), &path));
        // Unplanned blocked points do not stop.
        let mut lane = straight_lane(10, 1, 0);
        lane.left.points[4].occ = 0;
        assert!(!stop_decision(&scene_of(vec![lane]), &[]));

        let mut short = straight_lane(10, 1, 0);
        short.left.points[0].plan = 1;
        short.right.points[0].plan = 1;
        let s = scene_of(vec![short]);
        let p = generate_path(&s);
        assert_eq!(p.len(), 1);
        assert!(stop_decision(&s, &p));
    }

    #[test]
    fn red_signal_stops_only_at_planned_junction_lanes() {
        let mut junction = straight_lane(5, 1, 1);
        junction.intersection = 1;
        let mut s = scene_of(vec![junction.clone()]);
        let path = generate_path(&s);
        assert!(!stop_decision(&s, &path));
        s.signal = Signal::Red;
        assert!(stop_decision(&s, &path));
        junction.points_mut().for_each(|p| p.plan = 0);
        let s = SceneAnnotation {
            lanes: vec![junction, straight_lane(5, 1, 1)],
            speed: 8.0,
            signal: Signal::Red,
        };
        assert!(!stop_decision(&s, &generate_path(&s)));
    }

    #[test]
    fn binarize_threshold_and_ties() {
        let probs = SceneProbabilities {
            lanes: vec![LaneProbabilities {
                points: vec![[0.0, 1.0], [1.0, 1.0], [0.0, -1.0], [1.0, -1.0]],
                int: 0.49,
                dir: 0.51,
                occ: vec![0.5; 4],
                plan: vec![0.49, 0.5, 0.51, 0.0],
            }],
            speed: 4.0,
            signal_logits: vec![0.0, 2.0, 1.0, -1.0],
        };
        let s = binarize(&probs, DEFAULT_TAU);
        let l = &s.lanes[0];
        assert_eq!((l.intersection, l.direction), (0, 1));
        assert!(l.points().all(|p| p.occ == 1));
        let plans: Vec<u8> = l.points().map(|p| p.plan).collect();
        assert_eq!(plans, vec![0, 1, 1, 0]);
        assert_eq!(l.right.points[1].xy(), [1.0, -1.0]);
        assert_eq!(s.signal, Signal::Red);
    }

    #[test]
    fn trajectory_assembly() {
        let path: Vec<[f64; 2]> = (0..10).map(|i| [i as f64, 0.0]).collect();
        let t = assemble_trajectory(path, 8.0, false).unwrap();
        assert_eq!(t.path.len(), 10);
        assert!(assemble_trajectory(vec![], 0.0, true).unwrap().stop);
        assert_eq!(
            assemble_trajectory(vec![], -1.0, true),
            Err(InterpretError::NegativeSpeed(-1.0))
        );
        let json = serde_json::to_string(&t).unwrap();
        assert!(json.starts_with(r#"{"path":[[0.0,0.0],"#));
        assert_eq!(serde_json::from_str::<Trajectory>(&json).unwrap(), t);
    }

    proptest! {
        #[test]
        fn path_matches_naive_oracle(scene in arb_scene()) {
            prop_assert_eq!(generate_path(&scene), naive_path(&scene));
        }

        #[test]
        fn binarize_is_idempotent_on_binary_scenes(scene in arb_scene()) {
            let once = binarize(&SceneProbabilities::from_scene(&scene), DEFAULT_TAU);
            prop_assert_eq!(&once.lanes, &scene.lanes);
            let twice = binarize(&SceneProbabilities::from_scene(&once), DEFAULT_TAU);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn path_translates_with_scene(scene in arb_scene(), dx in -5.0f64..5.0, dy in -5.0f64..5.0) {
            let mut moved = scene.clone();
            for l in &mut moved.lanes {
                l.points_mut().for_each(|p| { p.x += dx; p.y += dy; });
            }
            let a = generate_path(&scene);
            let b = generate_path(&moved);
            prop_assert_eq!(a.len(), b.len());
            // Lane order may change with the origin; compare as multisets.
            let key = |p: &[f64; 2]| (p[0], p[1]);
            let mut shifted: Vec<_> = a.iter().map(|p| key(&[p[0] + dx, p[1] + dy])).collect();
            let mut got: Vec<_> = b.iter().map(key).collect();
            shifted.sort_by(|x, y| x.partial_cmp(y).unwrap());
            got.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for (s, g) in shifted.iter().zip(&got) {
                prop_assert!((s.0 - g.0).abs() < 1e-9 && (s.1 - g.1).abs() < 1e-9);
            }
        }

        #[test]
        fn clearing_occupancy_never_releases_stop(scene in arb_scene(), pick in any::<prop::sample::Index>()) {
            let before = stop_decision(&scene, &generate_path(&scene));
            let mut flipped = scene.clone();
            let cells: Vec<(usize, usize)> = flipped.lanes.iter().enumerate()
                .flat_map(|(i, l)| (0..l.left.len() + l.right.len()).map(move |k| (i, k)))
                .collect();
            if !cells.is_empty() {
                let (i, k) = cells[pick.index(cells.len())];
                if let Some(p) = flipped.lanes[i].points_mut().nth(k) { p.occ = 0; }
            }
            let after = stop_decision(&flipped, &generate_path(&flipped));
            prop_assert!(!before || after);
        }
    }
}
