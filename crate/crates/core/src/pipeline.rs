//! End-to-end orchestration: dataset synthesis, training, sampling,
//! lifting, allocation, execution, evaluation, and the ablation modes.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{
    assign_arms, detect_conflicts, precedence_cuts, render_overlay, schedule_bnb,
    segment_trajectory_with_cuts, validate_schedule, vlm_allocate, ArmAssignment, ArmGeometry,
    ConflictGraph, PrecedenceDag, Schedule, Segment, SegmentParams, Slot, VlmOutcome,
};
use crate::config::RunConfig;
use crate::dualsim::{evaluate_task, execute_schedule, Predicate, Region, TaskGoal, World};
use crate::lift3d::{lift_trajectory, EpisodeDepth, LiftConfig, Trajectory3D};
use crate::rng::Rng;
use crate::scene::{
    generate_episode, ground_targets, track_flows, EpisodeRecord, FlowTensor, Grounding,
    TaskTemplate,
};
use crate::sfdnet::{sample_flows, train, write_loss_csv, SfdBundle, TrainItem};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
    #[error(transparent)]
    Lift(#[from] crate::lift3d::LiftError),
    #[error(transparent)]
    Alloc(#[from] crate::allocator::AllocError),
    #[error(transparent)]
    Sim(#[from] crate::dualsim::SimError),
    #[error(transparent)]
    Net(#[from] crate::sfdnet::SfdError),
    #[error("missing checkpoint {0} (run `sfd train` or pass --train)")]
    MissingCheckpoint(PathBuf),
    #[error("dataset {0} not found (run `sfd synth` first)")]
    MissingDataset(PathBuf),
    #[error("episode index {index} out of range ({len} episodes)")]
    BadEpisodeIndex { index: usize, len: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    Full,
    NoAllocation,
    NoSiamese,
}

impl PipelineMode {
    pub fn name(&self) -> &'static str {
        match self {
            PipelineMode::Full => "full",
            PipelineMode::NoAllocation => "no_allocation",
            PipelineMode::NoSiamese => "no_siamese",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(PipelineMode::Full),
            "no_allocation" => Some(PipelineMode::NoAllocation),
            "no_siamese" => Some(PipelineMode::NoSiamese),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub index: usize,
    pub success: bool,
    pub reasons: Vec<String>,
    pub collisions: usize,
    pub makespan: f64,
    pub vlm_fallback: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_makespan: f64,
    pub collision_episodes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub task: String,
    pub mode: String,
    pub oracle_flows: bool,
    pub seed: u64,
    pub episodes: Vec<EpisodeResult>,
    pub summary: Summary,
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        use std::io::Write;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunReport> {
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }
}

/// Generate train and eval datasets for one task.
pub fn synth_dataset(cfg: &RunConfig, task: TaskTemplate) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(&cfg.data_dir)?;
    let gen = |count: usize, salt: u64| -> Result<Vec<EpisodeRecord>> {
        (0..count)
            .map(|i| Ok(generate_episode(task, cfg.seed ^ salt ^ (i as u64) << 8)?))
            .collect()
    };
    let train_eps = gen(cfg.data.train_count, 0x0)?;
    let eval_eps = gen(cfg.data.eval_count, 0xe7a1_0000)?;
    let train_path = cfg.episodes_path(task, "train");
    let eval_path = cfg.episodes_path(task, "eval");
    EpisodeRecord::save_jsonl(&train_eps, &train_path)?;
    EpisodeRecord::save_jsonl(&eval_eps, &eval_path)?;
    Ok((train_path, eval_path))
}

pub fn load_episodes(cfg: &RunConfig, task: TaskTemplate, split: &str) -> Result<Vec<EpisodeRecord>> {
    let path = cfg.episodes_path(task, split);
    if !path.exists() {
        return Err(PipelineError::MissingDataset(path));
    }
    Ok(EpisodeRecord::load_jsonl(&path)?)
}

/// Ground-truth flows for an episode via grounding + tracking.
pub fn episode_flows(ep: &EpisodeRecord, grid: usize) -> Result<(Grounding, FlowTensor, FlowTensor)> {
    let grounding = ground_targets(ep, &ep.instruction)?;
    let (f1, f2) = track_flows(ep, &grounding.boxes.0, &grounding.boxes.1, grid)?;
    Ok((grounding, f1, f2))
}

pub fn build_train_items(episodes: &[EpisodeRecord], grid: usize) -> Result<Vec<TrainItem>> {
    episodes
        .iter()
        .map(|ep| {
            let (_, f1, f2) = episode_flows(ep, grid)?;
            Ok(TrainItem { flows: (f1, f2), instruction: ep.instruction.clone() })
        })
        .collect()
}

/// Train (stage 1 + stage 2) and persist the checkpoint plus the loss log.
pub fn train_command(cfg: &RunConfig, task: TaskTemplate, siamese: bool) -> Result<PathBuf> {
    let train_eps = load_episodes(cfg, task, "train")?;
    let eval_eps = load_episodes(cfg, task, "eval")?;
    let items = build_train_items(&train_eps, cfg.model.g)?;
    let val_items = build_train_items(&eval_eps, cfg.model.g)?;
    let (bundle, log) = train(&items, &val_items, &cfg.model_config(), &cfg.train_config(siamese))?;
    std::fs::create_dir_all(cfg.out_dir.as_path())?;
    let ckpt = cfg.checkpoint_path(siamese);
    if let Some(parent) = ckpt.parent() {
        std::fs::create_dir_all(parent)?;
    }
    bundle.save(&ckpt)?;
    let suffix = if siamese { "" } else { "_nosiamese" };
    write_loss_csv(&cfg.out_dir.join(format!("loss_{}{suffix}.csv", task.name())), &log)?;
    Ok(ckpt)
}

/// Everything derived from one episode up to the schedule.
pub struct PlannedEpisode {
    pub grounding: Grounding,
    pub flows: (FlowTensor, FlowTensor),
    pub trajs: (Trajectory3D, Trajectory3D),
    pub segments: Vec<Segment>,
    pub assignment: ArmAssignment,
    pub conflicts: ConflictGraph,
    pub dag: PrecedenceDag,
    pub schedule: Schedule,
    pub makespan: f64,
    pub vlm_fallback: Option<String>,
    pub overlay_svg: String,
}

pub fn arm_geometry(cfg: &RunConfig) -> ArmGeometry {
    ArmGeometry { reach: cfg.sim.reach, ..ArmGeometry::default() }
}

/// Plan one episode: flows (oracle or sampled), lift, segment, schedule.
pub fn plan_episode(
    cfg: &RunConfig,
    ep: &EpisodeRecord,
    mode: PipelineMode,
    oracle_flows: bool,
    bundle: Option<&SfdBundle>,
    episode_index: usize,
) -> Result<PlannedEpisode> {
    let (grounding, gt1, gt2) = episode_flows(ep, cfg.model.g)?;
    let (f1, f2) = if oracle_flows {
        (gt1, gt2)
    } else {
        let bundle = bundle.expect("sampling requires a checkpoint");
        let mut rng = Rng::seed(cfg.seed ^ 0x5a3f ^ (episode_index as u64) << 16);
        sample_flows(
            bundle,
            (&grounding.boxes.0, &grounding.boxes.1),
            &ep.instruction,
            (ep.camera.w, ep.camera.h),
            &mut rng,
        )?
    };

    let depth = EpisodeDepth { episode: ep };
    let lift_cfg = |stream: u8| LiftConfig { v_max: cfg.sim.v_max, stream, ..LiftConfig::default() };
    let t1 = lift_trajectory(&f1, &ep.camera, &depth, &lift_cfg(0))?;
    let t2 = lift_trajectory(&f2, &ep.camera, &depth, &lift_cfg(1))?;

    let arms = arm_geometry(cfg);
    let assignment = assign_arms((&t1, &t2), &arms)?;

    let params = SegmentParams { max_segments: cfg.allocator.m_max, ..SegmentParams::default() };
    let (segments, conflicts, dag, schedule, fallback) = match mode {
        PipelineMode::NoAllocation => {
            // Allocator bypassed: both full trajectories run simultaneously
            // as single segments in one slot.
            let mut segs = segment_trajectory_with_cuts(&t1, Some(1), &params, 0, &[])?;
            segs.extend(segment_trajectory_with_cuts(&t2, Some(1), &params, 1, &[])?);
            let schedule = Schedule {
                slots: vec![Slot {
                    entries: {
                        let mut e: Vec<(usize, usize)> =
                            segs.iter().map(|s| (assignment.arm_of(s), s.id)).collect();
                        e.sort_unstable();
                        e
                    },
                }],
            };
            (segs, ConflictGraph::default(), PrecedenceDag::default(), schedule, None)
        }
        PipelineMode::Full | PipelineMode::NoSiamese => {
            let p1 = t1.waypoints.len();
            let p2 = t2.waypoints.len();
            let cuts1 = precedence_cuts(0, &ep.precedence, p1);
            let cuts2 = precedence_cuts(1, &ep.precedence, p2);
            let mut segs = segment_trajectory_with_cuts(&t1, None, &params, 0, &cuts1)?;
            let base = segs.len();
            segs.extend(segment_trajectory_with_cuts(&t2, None, &params, base, &cuts2)?);
            let conflicts =
                detect_conflicts(&segs, (&t1, &t2), &assignment, &arms, cfg.allocator.d_safe);
            let dag = PrecedenceDag::build(&segs, &ep.precedence, (&t1, &t2))?;
            let (schedule, fallback) = match &cfg.vlm.endpoint {
                Some(endpoint) => {
                    let overlay = render_overlay(ep, (&t1, &t2), &segs, &assignment);
                    let (schedule, outcome) = vlm_allocate(
                        endpoint,
                        cfg.vlm_timeout(),
                        &ep.instruction,
                        &overlay,
                        &segs,
                        (&t1, &t2),
                        &conflicts,
                        &dag,
                        &assignment,
                    )?;
                    let fb = match outcome {
                        VlmOutcome::External => None,
                        VlmOutcome::Fallback(reason) => Some(reason),
                    };
                    (schedule, fb)
                }
                None => (schedule_bnb(&segs, &conflicts, &dag, &assignment)?, None),
            };
            debug_assert!(
                validate_schedule(&schedule, &segs, &conflicts, &dag, &assignment).is_empty()
            );
            (segs, conflicts, dag, schedule, fallback)
        }
    };

    let makespan = schedule.makespan(&segments);
    let overlay_svg = render_overlay(ep, (&t1, &t2), &segments, &assignment);
    Ok(PlannedEpisode {
        grounding,
        flows: (f1, f2),
        trajs: (t1, t2),
        segments,
        assignment,
        conflicts,
        dag,
        schedule,
        makespan,
        vlm_fallback: fallback,
        overlay_svg,
    })
}

/// Execute a planned episode in a fresh world and evaluate the task goal.
pub fn execute_and_evaluate(
    cfg: &RunConfig,
    ep: &EpisodeRecord,
    plan: &PlannedEpisode,
) -> Result<(crate::dualsim::TaskOutcome, Vec<crate::dualsim::Event>)> {
    let goal = build_goal(ep, &plan.grounding)?;
    let arms = arm_geometry(cfg);
    let mut world = World::from_episode(ep, arms.bases, cfg.sim.v_max, goal.regions.clone());
    execute_schedule(
        &mut world,
        &plan.schedule,
        &plan.segments,
        (&plan.trajs.0, &plan.trajs.1),
        &plan.assignment,
        cfg.sim.dt,
    )?;
    let outcome = evaluate_task(&world, &goal)?;
    Ok((outcome, world.events))
}

/// Full pipeline over the eval split.
pub fn run_pipeline(cfg: &RunConfig, mode: PipelineMode, oracle_flows: bool) -> Result<RunReport> {
    let task = cfg.template()?;
    let episodes = load_episodes(cfg, task, "eval")?;
    let bundle = if oracle_flows {
        None
    } else {
        let path = cfg.checkpoint_path(mode != PipelineMode::NoSiamese);
        if !path.exists() {
            return Err(PipelineError::MissingCheckpoint(path));
        }
        Some(SfdBundle::load(&path)?)
    };
    let mut results = Vec::with_capacity(episodes.len());
    for (index, ep) in episodes.iter().enumerate() {
        let plan = plan_episode(cfg, ep, mode, oracle_flows, bundle.as_ref(), index)?;
        let (outcome, _events) = execute_and_evaluate(cfg, ep, &plan)?;
        results.push(EpisodeResult {
            index,
            success: outcome.success,
            reasons: outcome.reasons,
            collisions: outcome.collisions,
            makespan: plan.makespan,
            vlm_fallback: plan.vlm_fallback,
        });
    }
    let summary = summarize(&results);
    Ok(RunReport {
        version: REPORT_VERSION,
        task: task.name().to_string(),
        mode: mode.name().to_string(),
        oracle_flows,
        seed: cfg.seed,
        episodes: results,
        summary,
    })
}

pub fn summarize(results: &[EpisodeResult]) -> Summary {
    let n = results.len();
    let successes = results.iter().filter(|r| r.success).count();
    let mean_makespan = if n == 0 {
        0.0
    } else {
        results.iter().map(|r| r.makespan).sum::<f64>() / n as f64
    };
    Summary {
        episodes: n,
        success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
        mean_makespan,
        collision_episodes: results.iter().filter(|r| r.collisions > 0).count(),
    }
}

/// Task-goal construction: regions and predicates per template, anchored on
/// the grounded targets and the fixture object.
pub fn build_goal(ep: &EpisodeRecord, grounding: &Grounding) -> Result<TaskGoal> {
    let (o1, o2) = grounding.objects;
    let find_fixture = |label: &str| -> Option<usize> {
        ep.objects.iter().position(|o| o.label == label)
    };
    let fixture_box = |idx: usize, margin: f64, z_lo: f64, z_hi: f64| -> (Vector3<f64>, Vector3<f64>) {
        let o = &ep.objects[idx];
        let p = o.pose.position();
        let h = o.half();
        (
            Vector3::new(p.x - h.x - margin, p.y - h.y - margin, z_lo),
            Vector3::new(p.x + h.x + margin, p.y + h.y + margin, z_hi),
        )
    };
    let region = |name: &str, lo: Vector3<f64>, hi: Vector3<f64>, watch: usize| Region {
        name: name.to_string(),
        lo: [lo.x, lo.y, lo.z],
        hi: [hi.x, hi.y, hi.z],
        watch,
    };

    let mut regions = Vec::new();
    let mut predicates = Vec::new();
    match ep.task {
        TaskTemplate::Packing => {
            let bx = find_fixture("box").expect("packing scene has a box");
            let (lo, hi) = fixture_box(bx, 0.01, -0.05, 0.20);
            regions.push(region("box_zone_1", lo, hi, o1));
            regions.push(region("box_zone_2", lo, hi, o2));
            predicates.push(Predicate::ObjectInRegion { object: o1, region: "box_zone_1".into() });
            predicates.push(Predicate::ObjectInRegion { object: o2, region: "box_zone_2".into() });
        }
        TaskTemplate::PutIntoPot => {
            let pot = find_fixture("pot").expect("pot scene has a pot");
            let pot_top = ep.objects[pot].top_z();
            let item_top = pot_top + 2.0 * ep.objects[o2].half()[2];
            let (lo, hi) = fixture_box(pot, 0.01, -0.05, pot_top + 0.25);
            regions.push(region("item_in_pot", lo, hi, o2));
            // Lid back above the placed item.
            let (llo, lhi) = fixture_box(pot, 0.02, item_top + 0.005, pot_top + 0.40);
            regions.push(region("lid_on_pot", llo, lhi, o1));
            // Lid parked away from the pot.
            let park = crate::scene::task_layout(ep.task).lid_park;
            regions.push(region(
                "lid_away",
                Vector3::new(park.0 - 0.10, park.1 - 0.10, -0.05),
                Vector3::new(park.0 + 0.10, park.1 + 0.10, 0.12),
                o1,
            ));
            predicates.push(Predicate::ObjectInRegion { object: o2, region: "item_in_pot".into() });
            predicates.push(Predicate::ObjectInRegion { object: o1, region: "lid_on_pot".into() });
            predicates.push(Predicate::RegionOrder {
                first: "lid_away".into(),
                then: "item_in_pot".into(),
            });
            predicates.push(Predicate::RegionOrder {
                first: "item_in_pot".into(),
                then: "lid_on_pot".into(),
            });
        }
        TaskTemplate::Pouring => {
            let layout = crate::scene::task_layout(ep.task);
            let work = layout.cup_work;
            let hover = layout.pour_hover;
            regions.push(region(
                "cup_at_work",
                Vector3::new(work.x - 0.05, work.y - 0.05, -0.05),
                Vector3::new(work.x + 0.05, work.y + 0.05, 0.12),
                o2,
            ));
            regions.push(region(
                "can_pour_zone",
                Vector3::new(hover.x - 0.05, hover.y - 0.06, 0.10),
                Vector3::new(hover.x + 0.07, hover.y + 0.06, 0.30),
                o1,
            ));
            predicates.push(Predicate::RegionOrder {
                first: "cup_at_work".into(),
                then: "can_pour_zone".into(),
            });
            // Both return near their original poses.
            let can0 = ep.pose(0, o1).position();
            let cup0 = ep.pose(0, o2).position();
            predicates.push(Predicate::ObjectNearPosition {
                object: o1,
                position: [can0.x, can0.y, can0.z],
                tol: 0.03,
            });
            predicates.push(Predicate::ObjectNearPosition {
                object: o2,
                position: [cup0.x, cup0.y, cup0.z],
                tol: 0.03,
            });
        }
        TaskTemplate::DrawerPlace => {
            let drawer = o1;
            let closed = ep.pose(0, drawer).position();
            let delta = crate::scene::task_layout(ep.task).drawer_open_delta;
            let open = Vector3::new(closed.x + delta.0, closed.y + delta.1, closed.z);
            let h = ep.objects[drawer].half();
            regions.push(region(
                "drawer_open_zone",
                Vector3::new(open.x - 0.04, open.y - 0.04, -0.05),
                Vector3::new(open.x + 0.04, open.y + 0.04, 0.12),
                drawer,
            ));
            regions.push(region(
                "drawer_closed_zone",
                Vector3::new(closed.x - 0.04, closed.y - 0.04, -0.05),
                Vector3::new(closed.x + 0.04, closed.y + 0.04, 0.12),
                drawer,
            ));
            regions.push(region(
                "item_in_drawer",
                Vector3::new(open.x - h.x - 0.01, open.y - h.y - 0.01, -0.05),
                Vector3::new(open.x + h.x + 0.01, open.y + h.y + 0.01, 0.20),
                o2,
            ));
            predicates.push(Predicate::RegionOrder {
                first: "drawer_open_zone".into(),
                then: "item_in_drawer".into(),
            });
            predicates.push(Predicate::RegionOrder {
                first: "item_in_drawer".into(),
                then: "drawer_closed_zone".into(),
            });
            predicates.push(Predicate::ObjectInRegion {
                object: o2,
                region: "item_in_drawer".into(),
            });
            predicates.push(Predicate::ObjectNearPosition {
                object: drawer,
                position: [closed.x, closed.y, closed.z],
                tol: 0.02,
            });
        }
    }
    Ok(TaskGoal { template: ep.task, regions, predicates })
}
