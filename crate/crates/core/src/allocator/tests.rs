use super::*;
use crate::lift3d::{Trajectory3D, Waypoint};
use crate::rng::Rng;
use nalgebra::Vector3;

fn straight_traj(stream: u8, from: Vector3<f64>, to: Vector3<f64>, p: usize, dt: f64) -> Trajectory3D {
    let waypoints = (0..p)
        .map(|i| {
            let a = i as f64 / (p - 1) as f64;
            Waypoint { pos: from + (to - from) * a, rpy: Vector3::zeros() }
        })
        .collect();
    Trajectory3D { stream, waypoints, timestamps: (0..p).map(|i| i as f64 * dt).collect() }
}

#[test]
fn straight_constant_speed_is_one_segment() {
    let t = straight_traj(0, Vector3::zeros(), Vector3::new(0.4, 0.0, 0.0), 32, 0.1);
    let segs = segment_trajectory(&t, None, &SegmentParams::default(), 0).unwrap();
    assert_eq!(segs.len(), 1);
    assert_eq!((segs[0].start, segs[0].end), (0, 32));
    assert!(segs[0].carry);
}

#[test]
fn pause_splits_into_two_segments() {
    // Move, pause for 5 steps at the midpoint, move again.
    let mut waypoints = Vec::new();
    let mut timestamps = Vec::new();
    let mut t = 0.0;
    for i in 0..10 {
        waypoints.push(Waypoint {
            pos: Vector3::new(0.02 * i as f64, 0.0, 0.0),
            rpy: Vector3::zeros(),
        });
        timestamps.push(t);
        t += 0.1;
    }
    let hold = waypoints.last().unwrap().pos;
    for _ in 0..5 {
        waypoints.push(Waypoint { pos: hold, rpy: Vector3::zeros() });
        timestamps.push(t);
        t += 0.1;
    }
    for i in 1..=10 {
        waypoints.push(Waypoint {
            pos: hold + Vector3::new(0.0, 0.02 * i as f64, 0.0),
            rpy: Vector3::zeros(),
        });
        timestamps.push(t);
        t += 0.1;
    }
    let traj = Trajectory3D { stream: 0, waypoints, timestamps };
    let segs = segment_trajectory(&traj, None, &SegmentParams::default(), 0).unwrap();
    // One pause breakpoint plus two 90-degree turns are not present
    // (the pause swallows the direction change), so expect 2 segments split
    // inside the pause.
    assert_eq!(segs.len(), 2, "{segs:?}");
    assert!(segs[0].end > 10 && segs[0].end <= 15, "split at {}", segs[0].end);
}

#[test]
fn explicit_count_partitions_range() {
    let t = straight_traj(1, Vector3::zeros(), Vector3::new(0.4, 0.0, 0.0), 32, 0.1);
    let segs = segment_trajectory(&t, Some(3), &SegmentParams::default(), 10).unwrap();
    assert_eq!(segs.len(), 3);
    assert_eq!(segs[0].start, 0);
    assert_eq!(segs.last().unwrap().end, 32);
    for w in segs.windows(2) {
        assert_eq!(w[0].end, w[1].start);
    }
    assert_eq!(segs.iter().map(|s| s.id).collect::<Vec<_>>(), vec![10, 11, 12]);
}

#[test]
fn explicit_count_out_of_range_rejected() {
    let t = straight_traj(0, Vector3::zeros(), Vector3::new(0.1, 0.0, 0.0), 8, 0.1);
    assert!(segment_trajectory(&t, Some(0), &SegmentParams::default(), 0).is_err());
    assert!(segment_trajectory(&t, Some(8), &SegmentParams::default(), 0).is_err());
}

fn two_arm_geometry() -> ArmGeometry {
    ArmGeometry::default()
}

#[test]
fn assign_arms_nearest_and_tiebreak() {
    let t0 = straight_traj(0, Vector3::new(-0.3, 0.0, 0.1), Vector3::new(-0.1, 0.0, 0.1), 8, 0.2);
    let t1 = straight_traj(1, Vector3::new(0.1, 0.0, 0.1), Vector3::new(0.3, 0.0, 0.1), 8, 0.2);
    let a = assign_arms((&t0, &t1), &two_arm_geometry()).unwrap();
    assert_eq!(a.stream_to_arm, [0, 1]);
    // Crossed starting sides flip the assignment.
    let b = assign_arms((&t1, &t0), &two_arm_geometry()).unwrap();
    assert_eq!(b.stream_to_arm, [1, 0]);
    // Perfectly symmetric scene: identity by tie-break.
    let s0 = straight_traj(0, Vector3::new(0.0, -0.1, 0.1), Vector3::new(0.0, 0.1, 0.1), 8, 0.2);
    let s1 = straight_traj(1, Vector3::new(0.0, -0.1, 0.1), Vector3::new(0.0, 0.1, 0.1), 8, 0.2);
    let c = assign_arms((&s0, &s1), &two_arm_geometry()).unwrap();
    assert_eq!(c.stream_to_arm, [0, 1]);
}

#[test]
fn assign_arms_infeasible_when_out_of_reach() {
    let t0 = straight_traj(0, Vector3::new(-2.0, 0.0, 0.1), Vector3::new(-1.8, 0.0, 0.1), 8, 0.2);
    let t1 = straight_traj(1, Vector3::new(0.1, 0.0, 0.1), Vector3::new(0.3, 0.0, 0.1), 8, 0.2);
    assert!(matches!(assign_arms((&t0, &t1), &two_arm_geometry()), Err(AllocError::Infeasible)));
}

/// Bases placed on the polylines so link corridors add nothing.
fn inline_geometry(t0: &Trajectory3D, t1: &Trajectory3D) -> ArmGeometry {
    ArmGeometry { bases: [t0.waypoints[0].pos, t1.waypoints[0].pos], reach: 10.0 }
}

#[test]
fn conflicts_far_crossing_and_boundary() {
    let t0 = straight_traj(0, Vector3::new(0.0, 0.0, 0.1), Vector3::new(0.4, 0.0, 0.1), 8, 0.2);
    // 1 m away: no conflict at d_safe = 0.1.
    let t1_far = straight_traj(1, Vector3::new(0.0, 1.0, 0.1), Vector3::new(0.4, 1.0, 0.1), 8, 0.2);
    let mk = |t: &Trajectory3D| segment_trajectory(t, Some(1), &SegmentParams::default(), 0).unwrap();
    let mk1 = |t: &Trajectory3D| segment_trajectory(t, Some(1), &SegmentParams::default(), 1).unwrap();
    let assignment = ArmAssignment { stream_to_arm: [0, 1] };

    let segs: Vec<Segment> =
        mk(&t0).into_iter().chain(mk1(&t1_far)).collect();
    let g = detect_conflicts(&segs, (&t0, &t1_far), &assignment, &inline_geometry(&t0, &t1_far), 0.1);
    assert!(g.is_empty());

    // Crossing polylines: conflict with distance 0.
    let t1_cross =
        straight_traj(1, Vector3::new(0.2, -0.2, 0.1), Vector3::new(0.2, 0.2, 0.1), 8, 0.2);
    let segs: Vec<Segment> = mk(&t0).into_iter().chain(mk1(&t1_cross)).collect();
    let g =
        detect_conflicts(&segs, (&t0, &t1_cross), &assignment, &inline_geometry(&t0, &t1_cross), 0.1);
    assert!(g.conflicts(0, 1));
    assert!(g.distances[&(0, 1)] < 1e-12);

    // Exactly d_safe apart: strict inequality means no edge.
    let t1_edge = straight_traj(1, Vector3::new(0.0, 0.1, 0.1), Vector3::new(0.4, 0.1, 0.1), 8, 0.2);
    let segs: Vec<Segment> = mk(&t0).into_iter().chain(mk1(&t1_edge)).collect();
    let g =
        detect_conflicts(&segs, (&t0, &t1_edge), &assignment, &inline_geometry(&t0, &t1_edge), 0.1);
    assert!(g.is_empty(), "distance exactly d_safe must not conflict");
}

fn synthetic_segment(id: usize, stream: u8, index: usize, duration: f64) -> Segment {
    Segment { id, stream, index, start: index * 4, end: index * 4 + 4, duration, carry: true }
}

#[test]
fn exhaustive_parallel_vs_serialized() {
    let segs = vec![synthetic_segment(0, 0, 0, 2.0), synthetic_segment(1, 1, 0, 3.0)];
    let assignment = ArmAssignment { stream_to_arm: [0, 1] };
    let dag = PrecedenceDag::default();
    // Non-conflicting: one slot, makespan 3.
    let g = ConflictGraph::default();
    let s = schedule_exhaustive(&segs, &g, &dag, &assignment).unwrap();
    assert_eq!(s.slots.len(), 1);
    assert_eq!(s.makespan(&segs), 3.0);
    // Conflicting: forced serialization, makespan 5.
    let mut g = ConflictGraph::default();
    g.insert(0, 1, 0.02);
    let s = schedule_exhaustive(&segs, &g, &dag, &assignment).unwrap();
    assert_eq!(s.slots.len(), 2);
    assert_eq!(s.makespan(&segs), 5.0);
}

#[test]
fn precedence_orders_pour_after_place() {
    // Pouring analog: container-placed (stream 1, id 2) must precede the
    // pour segment (stream 0, id 1).
    let segs = vec![
        synthetic_segment(0, 0, 0, 1.0), // can transit
        synthetic_segment(1, 0, 1, 1.5), // pour
        synthetic_segment(2, 1, 0, 2.0), // cup to work position
        synthetic_segment(3, 1, 1, 1.0), // cup return
    ];
    let assignment = ArmAssignment { stream_to_arm: [0, 1] };
    let mut dag = PrecedenceDag::default();
    dag.edges.insert((0, 1));
    dag.edges.insert((2, 3));
    dag.edges.insert((2, 1)); // container placed before pour
    dag.edges.insert((1, 3)); // pour before container return
    let conflicts = ConflictGraph::default();
    for schedule in [
        schedule_exhaustive(&segs, &conflicts, &dag, &assignment).unwrap(),
        schedule_bnb(&segs, &conflicts, &dag, &assignment).unwrap(),
    ] {
        let slot_of = |id: usize| {
            schedule
                .slots
                .iter()
                .position(|s| s.segment_ids().contains(&id))
                .unwrap()
        };
        assert!(slot_of(2) < slot_of(1), "pour scheduled before container placed");
        assert!(slot_of(1) < slot_of(3));
        assert!(validate_schedule(&schedule, &segs, &conflicts, &dag, &assignment).is_empty());
    }
}

#[test]
fn conflict_free_meets_lower_bound_and_full_conflict_serializes() {
    // One arm dominates every slot, so the per-arm lower bound is
    // attainable under barrier-synchronized slots.
    let segs = vec![
        synthetic_segment(0, 0, 0, 2.0),
        synthetic_segment(1, 0, 1, 2.0),
        synthetic_segment(2, 1, 0, 1.5),
        synthetic_segment(3, 1, 1, 0.5),
    ];
    let assignment = ArmAssignment { stream_to_arm: [0, 1] };
    let mut dag = PrecedenceDag::default();
    dag.edges.insert((0, 1));
    dag.edges.insert((2, 3));
    let free = ConflictGraph::default();
    let s = schedule_bnb(&segs, &free, &dag, &assignment).unwrap();
    // max per-arm sum = max(4.0, 2.0) = 4.0, met by pairing slots.
    assert_eq!(s.makespan(&segs), 4.0);
    let mut full = ConflictGraph::default();
    for a in [0usize, 1] {
        for b in [2usize, 3] {
            full.insert(a, b, 0.0);
        }
    }
    let s = schedule_bnb(&segs, &full, &dag, &assignment).unwrap();
    assert_eq!(s.makespan(&segs), 6.0);
}

fn random_instance(rng: &mut Rng, max_total: usize) -> (Vec<Segment>, ConflictGraph, PrecedenceDag) {
    loop {
        let k0 = 1 + rng.below(max_total - 1);
        let k1 = 1 + rng.below(max_total.saturating_sub(k0).max(1));
        if k0 + k1 > max_total {
            continue;
        }
        let mut segs = Vec::new();
        let mut id = 0;
        for i in 0..k0 {
            segs.push(synthetic_segment(id, 0, i, rng.uniform(0.5, 3.0)));
            id += 1;
        }
        for i in 0..k1 {
            segs.push(synthetic_segment(id, 1, i, rng.uniform(0.5, 3.0)));
            id += 1;
        }
        let mut conflicts = ConflictGraph::default();
        let mut dag = PrecedenceDag::default();
        for s in &segs {
            if let Some(next) = segs.iter().find(|o| o.stream == s.stream && o.index == s.index + 1)
            {
                dag.edges.insert((s.id, next.id));
            }
        }
        for a in 0..k0 {
            for b in 0..k1 {
                let (ida, idb) = (a, k0 + b);
                if rng.next_f64() < 0.3 {
                    conflicts.insert(ida, idb, rng.uniform(0.0, 0.09));
                }
                if rng.next_f64() < 0.15 {
                    if rng.next_f64() < 0.5 {
                        dag.edges.insert((ida, idb));
                    } else {
                        dag.edges.insert((idb, ida));
                    }
                }
            }
        }
        if !dag.has_cycle(&segs) {
            return (segs, conflicts, dag);
        }
    }
}

#[test]
fn bnb_matches_exhaustive_on_random_instances() {
    let mut rng = Rng::seed(61);
    let assignment = ArmAssignment { stream_to_arm: [0, 1] };
    for _ in 0..60 {
        let (segs, conflicts, dag) = random_instance(&mut rng, 8);
        let oracle = schedule_exhaustive(&segs, &conflicts, &dag, &assignment).unwrap();
        let bnb = schedule_bnb(&segs, &conflicts, &dag, &assignment).unwrap();
        let greedy = greedy_schedule(&segs, &conflicts, &dag, &assignment).unwrap();
        assert_eq!(
            bnb.makespan(&segs),
            oracle.makespan(&segs),
            "instance {segs:?} {dag:?}"
        );
        assert!(greedy.makespan(&segs) >= oracle.makespan(&segs) - 1e-12);
        for s in [&oracle, &bnb, &greedy] {
            assert!(validate_schedule(s, &segs, &conflicts, &dag, &assignment).is_empty());
        }
    }
}

#[test]
fn validator_catches_constructed_violations() {
    let segs = vec![synthetic_segment(0, 0, 0, 1.0), synthetic_segment(1, 1, 0, 1.0)];
    let assignment = ArmAssignment { stream_to_arm: [0, 1] };
    let mut conflicts = ConflictGraph::default();
    conflicts.insert(0, 1, 0.0);
    let dag = PrecedenceDag::default();
    // Conflicting pair co-scheduled.
    let bad = Schedule { slots: vec![Slot { entries: vec![(0, 0), (1, 1)] }] };
    let v = validate_schedule(&bad, &segs, &conflicts, &dag, &assignment);
    assert!(v.iter().any(|m| m.contains("conflicting pair")));
    // Missing segment.
    let partial = Schedule { slots: vec![Slot { entries: vec![(0, 0)] }] };
    let v = validate_schedule(&partial, &segs, &conflicts, &dag, &assignment);
    assert!(v.iter().any(|m| m.contains("never scheduled")));
    // Wrong arm.
    let wrong = Schedule {
        slots: vec![
            Slot { entries: vec![(1, 0)] },
            Slot { entries: vec![(1, 1)] },
        ],
    };
    let v = validate_schedule(&wrong, &segs, &ConflictGraph::default(), &dag, &assignment);
    assert!(v.iter().any(|m| m.contains("wrong arm")));
}

#[test]
fn overlay_is_valid_and_deterministic() {
    let ep = crate::scene::generate_episode(crate::scene::TaskTemplate::Packing, 2).unwrap();
    let t0 = straight_traj(0, Vector3::new(-0.2, 0.0, 0.05), Vector3::new(-0.06, 0.18, 0.05), 16, 0.2);
    let t1 = straight_traj(1, Vector3::new(0.2, 0.0, 0.05), Vector3::new(0.06, 0.18, 0.05), 16, 0.2);
    let assignment = ArmAssignment { stream_to_arm: [0, 1] };
    // Zero segments: still a valid document with scene bounds.
    let empty = render_overlay(&ep, (&t0, &t1), &[], &assignment);
    assert!(empty.starts_with("<svg"));
    assert!(empty.ends_with("</svg>"));
    assert!(empty.contains("viewBox=\"0 0 64 64\""));
    // Three segments: three polylines, three labels, pairwise-distinct colors.
    let mut segs = segment_trajectory(&t0, Some(2), &SegmentParams::default(), 0).unwrap();
    segs.extend(segment_trajectory(&t1, Some(1), &SegmentParams::default(), 2).unwrap());
    let svg = render_overlay(&ep, (&t0, &t1), &segs, &assignment);
    assert_eq!(svg.matches("<polyline").count(), 3);
    assert_eq!(svg.matches("<text").count(), 6); // three labels + legend rows
    let colors: Vec<&str> = ["#e6194b", "#3cb44b", "#4363d8"]
        .iter()
        .filter(|c| svg.contains(**c))
        .copied()
        .collect();
    assert_eq!(colors.len(), 3);
    // Byte-identical on identical input.
    let svg2 = render_overlay(&ep, (&t0, &t1), &segs, &assignment);
    assert_eq!(svg, svg2);
}

#[test]
fn precedence_dag_from_episode_fractions() {
    let ep = crate::scene::generate_episode(crate::scene::TaskTemplate::PutIntoPot, 4).unwrap();
    // Fine enough splits that the lid-off end and lid-on start fractions
    // land in different segments.
    let t0 = straight_traj(0, Vector3::new(-0.2, 0.0, 0.05), Vector3::new(0.2, 0.0, 0.05), 32, 0.1);
    let t1 = straight_traj(1, Vector3::new(0.2, 0.1, 0.05), Vector3::new(-0.2, 0.1, 0.05), 32, 0.1);
    let cuts0 = precedence_cuts(0, &ep.precedence, 32);
    let cuts1 = precedence_cuts(1, &ep.precedence, 32);
    let mut segs =
        segment_trajectory_with_cuts(&t0, Some(3), &SegmentParams::default(), 0, &cuts0).unwrap();
    let base = segs.len();
    segs.extend(
        segment_trajectory_with_cuts(&t1, Some(2), &SegmentParams::default(), base, &cuts1)
            .unwrap(),
    );
    let dag = PrecedenceDag::build(&segs, &ep.precedence, (&t0, &t1)).unwrap();
    // Within-stream chains present.
    assert!(dag.edges.contains(&(0, 1)));
    // Cross-stream edges landed in both directions.
    assert!(dag.edges.iter().any(|(a, b)| *a < base && *b >= base));
    assert!(dag.edges.iter().any(|(a, b)| *a >= base && *b < base));
    assert!(!dag.has_cycle(&segs));
}
