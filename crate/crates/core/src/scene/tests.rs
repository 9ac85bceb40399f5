use super::*;
use nalgebra::{Matrix3, Vector3};

fn aabb_overlap_volume(
    (lo_a, hi_a): (Vector3<f64>, Vector3<f64>),
    (lo_b, hi_b): (Vector3<f64>, Vector3<f64>),
) -> f64 {
    let mut vol = 1.0;
    for ax in 0..3 {
        let lo = lo_a[ax].max(lo_b[ax]);
        let hi = hi_a[ax].min(hi_b[ax]);
        // Touching faces are fine; penalize only strict interpenetration.
        if hi - lo <= 1e-9 {
            return 0.0;
        }
        vol *= hi - lo;
    }
    vol
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = generate_episode(TaskTemplate::Packing, 7).unwrap();
    let b = generate_episode(TaskTemplate::Packing, 7).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = generate_episode(TaskTemplate::Packing, 8).unwrap();
    assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
}

#[test]
fn put_into_pot_precedence_chain() {
    let ep = generate_episode(TaskTemplate::PutIntoPot, 3).unwrap();
    let roles: Vec<&str> = ep.precedence.iter().map(|p| p.role.as_str()).collect();
    assert!(roles.contains(&"lid_off_before_item_in"));
    assert!(roles.contains(&"item_in_before_lid_on"));
    // lid-off ends on stream 0 before item-in starts on stream 1, and the
    // item must be done before the lid returns.
    let off = ep.precedence.iter().find(|p| p.role == "lid_off_before_item_in").unwrap();
    assert_eq!(off.before.0, 0);
    assert_eq!(off.after.0, 1);
    let on = ep.precedence.iter().find(|p| p.role == "item_in_before_lid_on").unwrap();
    assert_eq!(on.before.0, 1);
    assert_eq!(on.after.0, 0);
    assert!(on.after.1 > off.before.1, "lid-on must map after lid-off on stream 0");
}

#[test]
fn no_initial_overlaps_across_seeds() {
    for template in TaskTemplate::ALL {
        for seed in 0..25u64 {
            let ep = generate_episode(template, seed).unwrap();
            for i in 0..ep.objects.len() {
                for j in (i + 1)..ep.objects.len() {
                    let a = ep.objects[i].aabb_at(&ep.objects[i].pose);
                    let b = ep.objects[j].aabb_at(&ep.objects[j].pose);
                    let vol = aabb_overlap_volume(a, b);
                    assert!(
                        vol <= 0.0,
                        "{} seed {seed}: objects {i} and {j} overlap by {vol:.2e}",
                        template.name()
                    );
                }
            }
        }
    }
}

#[test]
fn grounding_returns_projected_boxes_in_named_order() {
    let ep = generate_episode(TaskTemplate::Packing, 11).unwrap();
    let g = ground_targets(&ep, &ep.instruction).unwrap();
    let (i, j) = g.objects;
    assert!(ep.objects[i].graspable && ep.objects[j].graspable);
    let want_i = ep.projected_bbox(0, i).unwrap();
    assert_eq!(g.boxes.0, want_i);
    // Stream 1 is the first-named item, which the generator puts on the left.
    assert!(ep.objects[i].pose.pos[0] < ep.objects[j].pose.pos[0]);
}

#[test]
fn grounding_absent_object_is_unknown_noun() {
    let ep = generate_episode(TaskTemplate::Packing, 11).unwrap();
    // Name a color/label pair that the generator did not place.
    let err = ground_instruction(&ep, "pack the red bowl and the blue bowl into the box");
    assert!(matches!(err, Err(SceneError::UnknownNoun(_))), "{err:?}");
}

#[test]
fn grounding_duplicate_match_is_ambiguous() {
    let mut ep = generate_episode(TaskTemplate::Packing, 11).unwrap();
    let (i, j) = {
        let g = ground_targets(&ep, &ep.instruction).unwrap();
        g.objects
    };
    // Recolor/relabel the second target into a copy of the first.
    ep.objects[j].label = ep.objects[i].label.clone();
    ep.objects[j].color = ep.objects[i].color.clone();
    let phrase = format!("{} {}", ep.objects[i].color, ep.objects[i].label);
    let err = ground_instruction(&ep, &format!("pack the {phrase} and the {phrase} into the box"));
    assert!(matches!(err, Err(SceneError::AmbiguousGrounding(_))), "{err:?}");
}

/// Hand-built single-box episode for flow tests: the box slides +x at a
/// constant rate at fixed height.
fn sliding_box_episode(dx_per_frame: f64, frames: usize) -> EpisodeRecord {
    let camera = generate::default_camera();
    let obj = SceneObject {
        label: "cube".into(),
        color: "red".into(),
        pose: Pose::new(Vector3::new(-0.1, 0.0, 0.02), 0.0),
        half_extents: [0.03, 0.03, 0.02],
        graspable: true,
        container: false,
    };
    let frames_v: Vec<Vec<Pose>> = (0..frames)
        .map(|t| {
            vec![Pose::new(
                Vector3::new(-0.1 + dx_per_frame * t as f64, 0.0, 0.02),
                0.0,
            )]
        })
        .collect();
    EpisodeRecord {
        version: EPISODE_SCHEMA_VERSION,
        task: TaskTemplate::Packing,
        instruction: "slide the red cube".into(),
        camera,
        objects: vec![obj],
        frames: frames_v,
        gripper_events: vec![],
        precedence: vec![],
        occlusions: vec![],
    }
}

#[test]
fn static_object_flow_is_constant() {
    let ep = sliding_box_episode(0.0, 6);
    let bb = ep.projected_bbox(0, 0).unwrap();
    let (f, _) = track_flows(&ep, &bb, &bb, 4).unwrap();
    for t in 1..6 {
        for c in 0..3 {
            for gy in 0..4 {
                for gx in 0..4 {
                    assert_eq!(f.get(c, t, gy, gx), f.get(c, 0, gy, gx));
                }
            }
        }
    }
}

#[test]
fn pure_translation_increments_grid_channels() {
    // Constant-height slide: pixel shift per frame is fx * dx / depth,
    // identical for every grid point on the top face.
    let dx = 0.01;
    let ep = sliding_box_episode(dx, 5);
    let bb = ep.projected_bbox(0, 0).unwrap();
    let (f, _) = track_flows(&ep, &bb, &bb, 4).unwrap();
    let depth = 1.25 - 0.04; // camera height minus top face height
    let du_norm = (64.0 * dx / depth) / 64.0;
    for t in 1..5 {
        for gy in 0..4 {
            for gx in 0..4 {
                let got = (f.get(0, t, gy, gx) - f.get(0, t - 1, gy, gx)) as f64;
                assert!((got - du_norm).abs() < 1e-4, "du {got} want {du_norm}");
                let dv = f.get(1, t, gy, gx) - f.get(1, t - 1, gy, gx);
                assert!(dv.abs() < 1e-6);
            }
        }
    }
}

#[test]
fn scripted_occlusion_zeroes_visibility_exactly_there() {
    let mut ep = sliding_box_episode(0.005, 12);
    ep.occlusions.push(OcclusionWindow { object: 0, start: 5, end: 9 });
    let bb = ep.projected_bbox(0, 0).unwrap();
    let (f, _) = track_flows(&ep, &bb, &bb, 4).unwrap();
    for t in 0..12 {
        let expect = !(5..=9).contains(&t);
        for gy in 0..4 {
            for gx in 0..4 {
                assert_eq!(f.get(2, t, gy, gx) > 0.5, expect, "frame {t}");
            }
        }
    }
    // Held values: channels 0-1 during occlusion equal the last visible frame.
    for t in 5..=9 {
        for gy in 0..4 {
            for gx in 0..4 {
                assert_eq!(f.get(0, t, gy, gx), f.get(0, 4, gy, gx));
            }
        }
    }
}

#[test]
fn flow_values_normalized_and_reprojectable() {
    for template in TaskTemplate::ALL {
        let ep = generate_episode(template, 2).unwrap();
        let g = ground_targets(&ep, &ep.instruction).unwrap();
        let (f1, f2) = track_flows(&ep, &g.boxes.0, &g.boxes.1, 8).unwrap();
        for (f, obj) in [(&f1, g.objects.0), (&f2, g.objects.1)] {
            assert_eq!(f.raw().len(), 3 * ep.num_frames() * 64);
            for t in 0..ep.num_frames() {
                for gy in 0..8 {
                    for gx in 0..8 {
                        let vis = f.get(2, t, gy, gx);
                        assert!(vis == 0.0 || vis == 1.0);
                        if vis > 0.5 {
                            let u = f.get(0, t, gy, gx);
                            let v = f.get(1, t, gy, gx);
                            assert!((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v));
                        }
                    }
                }
            }
            // Projection/tracking consistency: re-project the rigidly
            // propagated attachment points and compare channels 0-1.
            let bb = ep.projected_bbox(0, obj).unwrap();
            for t in 0..ep.num_frames() {
                let pose_t = ep.pose(t, obj);
                for gy in 0..8 {
                    for gx in 0..8 {
                        if f.get(2, t, gy, gx) < 0.5 {
                            continue;
                        }
                        let u0 = bb.u_min + (gx as f64 + 0.5) / 8.0 * (bb.u_max - bb.u_min);
                        let v0 = bb.v_min + (gy as f64 + 0.5) / 8.0 * (bb.v_max - bb.v_min);
                        let local = super::flow::attach_top_face(&ep, obj, (u0, v0));
                        let world_t = pose_t.transform(&local);
                        let (u, v, _) = ep.camera.project(&world_t).unwrap();
                        assert!((f.get(0, t, gy, gx) as f64 - u / 64.0).abs() < 1e-6);
                        assert!((f.get(1, t, gy, gx) as f64 - v / 64.0).abs() < 1e-6);
                    }
                }
            }
        }
    }
}

#[test]
fn depth_table_and_box_faces() {
    let ep = sliding_box_episode(0.0, 2);
    // Straight-down camera at height 1.25: every table pixel reads 1.25.
    for (u, v) in [(5.0, 5.0), (60.0, 10.0), (32.0, 50.0)] {
        let d = render_depth(&ep, 0, (u, v)).unwrap();
        assert!((d - 1.25).abs() < 1e-12, "table depth {d}");
    }
    // Pixel over the box top face: height 0.04 -> depth 1.21.
    let (u, v, _) = ep
        .camera
        .project(&Vector3::new(-0.1, 0.0, 0.04))
        .unwrap();
    let d = render_depth(&ep, 0, (u, v)).unwrap();
    assert!((d - 1.21).abs() < 1e-9, "box depth {d}");
}

#[test]
fn depth_matches_ray_march_oracle() {
    let ep = generate_episode(TaskTemplate::PutIntoPot, 5).unwrap();
    let mut rng = crate::rng::Rng::seed(99);
    let inside = |p: &Vector3<f64>, frame: usize| -> bool {
        if p.z <= 0.0 {
            return true;
        }
        for (i, o) in ep.objects.iter().enumerate() {
            let local = ep.pose(frame, i).inverse_transform(p);
            let h = o.half();
            if local.x.abs() <= h.x && local.y.abs() <= h.y && local.z.abs() <= h.z {
                return true;
            }
        }
        false
    };
    for _ in 0..1000 {
        let u = rng.uniform(1.0, 63.0);
        let v = rng.uniform(1.0, 63.0);
        let frame = rng.below(ep.num_frames());
        let analytic = render_depth(&ep, frame, (u, v)).unwrap();
        // March at 1e-4 to bracket the first surface, then bisect.
        let (origin, dir) = ep.camera.pixel_ray(u, v);
        let mut t_prev = 0.05;
        let mut t_hit = None;
        let mut t = t_prev;
        while t < 2.0 {
            if inside(&(origin + dir * t), frame) {
                t_hit = Some(t);
                break;
            }
            t_prev = t;
            t += 1e-4;
        }
        let t_hit = t_hit.expect("ray must hit table");
        let (mut lo, mut hi) = (t_prev, t_hit);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if inside(&(origin + dir * mid), frame) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!(
            (analytic - hi).abs() < 1e-6,
            "pixel ({u:.1},{v:.1}) frame {frame}: analytic {analytic} oracle {hi}"
        );
    }
}

#[test]
fn flow_file_roundtrip() {
    let ep = generate_episode(TaskTemplate::Packing, 4).unwrap();
    let g = ground_targets(&ep, &ep.instruction).unwrap();
    let (f1, f2) = track_flows(&ep, &g.boxes.0, &g.boxes.1, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flows.sfdf");
    write_flow_file(&path, &f1, &f2).unwrap();
    let (r1, r2) = read_flow_file(&path).unwrap();
    assert_eq!(f1, r1);
    assert_eq!(f2, r2);
}

#[test]
fn episode_jsonl_roundtrip() {
    let eps: Vec<EpisodeRecord> =
        (0..3).map(|s| generate_episode(TaskTemplate::Pouring, s).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("episodes.jsonl");
    EpisodeRecord::save_jsonl(&eps, &path).unwrap();
    let back = EpisodeRecord::load_jsonl(&path).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(serde_json::to_string(&eps[1]).unwrap(), serde_json::to_string(&back[1]).unwrap());
}

#[test]
fn camera_validation_rejects_bad_rotation() {
    let r = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.1, 0.0, 0.0, 1.0);
    assert!(Camera::new([64.0, 64.0, 32.0, 32.0], r, Vector3::zeros(), 64, 64).is_err());
}
