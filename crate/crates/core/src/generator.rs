//! Deterministic synthetic scenario generation from parametric lane templates.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scenario::{
    AgentState, AgentTrack, AgentType, LanePolyline, MarkingType, Scenario, TimestepLayout,
    TrackCategory, SCHEMA_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Straight,
    Curve,
    Intersection,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] =
        [ScenarioKind::Straight, ScenarioKind::Curve, ScenarioKind::Intersection];

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::Curve => "curve",
            ScenarioKind::Intersection => "intersection",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "straight" => Some(ScenarioKind::Straight),
            "curve" => Some(ScenarioKind::Curve),
            "intersection" => Some(ScenarioKind::Intersection),
            _ => None,
        }
    }
}

// ---- polyline helpers ----

fn path_point(pts: &[[f64; 2]], s: f64) -> [f64; 2] {
    let mut remaining = s.max(0.0);
    for w in pts.windows(2) {
        let seg = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        if remaining <= seg {
            let t = if seg > 0.0 { remaining / seg } else { 0.0 };
            return [w[0][0] + t * (w[1][0] - w[0][0]), w[0][1] + t * (w[1][1] - w[0][1])];
        }
        remaining -= seg;
    }
    *pts.last().unwrap()
}

fn path_tangent(pts: &[[f64; 2]], s: f64) -> [f64; 2] {
    let mut remaining = s.max(0.0);
    for w in pts.windows(2) {
        let dx = w[1][0] - w[0][0];
        let dy = w[1][1] - w[0][1];
        let seg = (dx * dx + dy * dy).sqrt();
        if remaining <= seg && seg > 0.0 {
            return [dx / seg, dy / seg];
        }
        remaining -= seg;
    }
    let w = &pts[pts.len() - 2..];
    let dx = w[1][0] - w[0][0];
    let dy = w[1][1] - w[0][1];
    let seg = (dx * dx + dy * dy).sqrt().max(1e-12);
    [dx / seg, dy / seg]
}

fn straight_pts(a: [f64; 2], b: [f64; 2], step: f64) -> Vec<[f64; 2]> {
    let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    let n = (len / step).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
        })
        .collect()
}

fn arc_pts(center: [f64; 2], radius: f64, a0: f64, a1: f64, step: f64) -> Vec<[f64; 2]> {
    let arc = (a1 - a0).abs() * radius;
    let n = (arc / step).ceil().max(2.0) as usize;
    (0..=n)
        .map(|i| {
            let a = a0 + (a1 - a0) * i as f64 / n as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

fn lane(
    id: u64,
    pts: Vec<[f64; 2]>,
    left_mark: MarkingType,
    right_mark: MarkingType,
    is_intersection: bool,
) -> LanePolyline {
    let n = pts.len();
    LanePolyline {
        id,
        centerline: pts,
        left_dist: vec![1.75; n],
        right_dist: vec![1.75; n],
        left_mark,
        right_mark,
        predecessors: vec![],
        successors: vec![],
        left_neighbor: None,
        right_neighbor: None,
        is_intersection,
    }
}

/// Minimal straight lane for unit tests elsewhere in the crate.
#[cfg(test)]
pub(crate) fn test_lane_straight(id: u64, a: [f64; 2], b: [f64; 2]) -> LanePolyline {
    lane(id, straight_pts(a, b, 1.0), MarkingType::Dashed, MarkingType::Solid, false)
}

// ---- kinematic profiles ----

#[derive(Debug, Clone, Copy)]
enum Profile {
    Const { v: f64 },
    Accelerate { v0: f64, a: f64, vmax: f64 },
    DecelStop { v0: f64, dec: f64 },
}

fn arc_lengths(profile: Profile, n_steps: usize, dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_steps);
    let mut s = 0.0;
    let mut v = match profile {
        Profile::Const { v } => v,
        Profile::Accelerate { v0, .. } => v0,
        Profile::DecelStop { v0, .. } => v0,
    };
    for _ in 0..n_steps {
        out.push(s);
        s += v * dt;
        v = match profile {
            Profile::Const { v } => v,
            Profile::Accelerate { a, vmax, .. } => (v + a * dt).clamp(0.0, vmax.min(29.0)),
            Profile::DecelStop { dec, .. } => (v - dec * dt).max(0.0),
        };
    }
    out
}

/// States along a polyline path. Velocity is the per-step finite difference so
/// stored positions and velocities stay mutually consistent; heading is the
/// path tangent.
fn track_along_path(pts: &[[f64; 2]], s0: f64, profile: Profile, n: usize, t_obs: usize, dt: f64) -> Vec<AgentState> {
    let ss = arc_lengths(profile, n + 1, dt);
    let positions: Vec<[f64; 2]> = ss.iter().map(|&s| path_point(pts, s0 + s)).collect();
    (0..n)
        .map(|t| {
            let p = positions[t];
            let q = positions[t + 1];
            let tan = path_tangent(pts, s0 + ss[t]);
            AgentState {
                x: p[0],
                y: p[1],
                vx: (q[0] - p[0]) / dt,
                vy: (q[1] - p[1]) / dt,
                heading: tan[1].atan2(tan[0]),
                observed: t < t_obs,
            }
        })
        .collect()
}

fn pedestrian_track(start: [f64; 2], dir: [f64; 2], speed: f64, n: usize, t_obs: usize, dt: f64) -> Vec<AgentState> {
    let norm = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt().max(1e-12);
    let d = [dir[0] / norm, dir[1] / norm];
    (0..n)
        .map(|t| AgentState {
            x: start[0] + d[0] * speed * dt * t as f64,
            y: start[1] + d[1] * speed * dt * t as f64,
            vx: d[0] * speed,
            vy: d[1] * speed,
            heading: d[1].atan2(d[0]),
            observed: t < t_obs,
        })
        .collect()
}

fn category_for(idx: usize) -> TrackCategory {
    match idx {
        0 => TrackCategory::Focal,
        1 | 2 => TrackCategory::Scored,
        3 | 4 => TrackCategory::Unscored,
        i if i % 2 == 1 => TrackCategory::Fragment,
        _ => TrackCategory::Unscored,
    }
}

/// Generate a scenario. Pure function of `(kind, n_agents, seed, layout)`.
pub fn generate_synthetic(
    kind: ScenarioKind,
    n_agents: usize,
    seed: u64,
    layout: &TimestepLayout,
) -> Scenario {
    assert!(n_agents >= 1, "need at least one agent");
    let mix = match kind {
        ScenarioKind::Straight => 1u64,
        ScenarioKind::Curve => 2,
        ScenarioKind::Intersection => 3,
    };
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ mix.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (n_agents as u64) << 17);
    let dt = 1.0 / layout.rate_hz;
    let n = layout.t_obs + layout.t_fut;
    let scenario = match kind {
        ScenarioKind::Straight => gen_straight(&mut rng, n_agents, n, layout.t_obs, dt),
        ScenarioKind::Curve => gen_curve(&mut rng, n_agents, n, layout.t_obs, dt),
        ScenarioKind::Intersection => gen_intersection(&mut rng, n_agents, n, layout.t_obs, dt),
    };
    let mut scenario = scenario;
    scenario.id = format!("{}-{}-a{}", kind.name(), seed, n_agents);
    scenario.schema_version = SCHEMA_VERSION;
    scenario.dt_s = dt;
    scenario.validate().expect("generated scenario must validate");
    scenario
}

fn empty_scenario() -> Scenario {
    Scenario {
        schema_version: SCHEMA_VERSION,
        id: String::new(),
        dt_s: 0.1,
        lanes: vec![],
        tracks: vec![],
    }
}

fn gen_straight(rng: &mut ChaCha8Rng, n_agents: usize, n: usize, t_obs: usize, dt: f64) -> Scenario {
    let mut sc = empty_scenario();
    let x0 = -80.0;
    let x1 = 220.0;
    let mut l1 = lane(
        1,
        straight_pts([x0, 0.0], [x1, 0.0], 5.0),
        MarkingType::Dashed,
        MarkingType::Solid,
        false,
    );
    l1.left_neighbor = Some(2);
    let mut l2 = lane(
        2,
        straight_pts([x0, 3.5], [x1, 3.5], 5.0),
        MarkingType::Solid,
        MarkingType::Dashed,
        false,
    );
    l2.right_neighbor = Some(1);
    sc.lanes = vec![l1, l2];

    let v_focal = rng.gen_range(8.0..14.0);
    let focal_start = 20.0 - x0; // arc length from lane start
    let l1_pts = sc.lanes[0].centerline.clone();
    let l2_pts = sc.lanes[1].centerline.clone();
    sc.tracks.push(AgentTrack {
        id: 0,
        agent_type: AgentType::Vehicle,
        category: TrackCategory::Focal,
        states: track_along_path(&l1_pts, focal_start, Profile::Const { v: v_focal }, n, t_obs, dt),
    });
    for i in 1..n_agents {
        let states = match i % 4 {
            1 => {
                // lead vehicle ahead on the same lane, slowing to a stop
                let v0 = rng.gen_range(6.0..10.0);
                track_along_path(
                    &l1_pts,
                    focal_start + rng.gen_range(25.0..40.0),
                    Profile::DecelStop { v0, dec: rng.gen_range(0.5..1.5) },
                    n,
                    t_obs,
                    dt,
                )
            }
            2 => {
                // pedestrian crossing the road ahead of the focal agent
                let x = 20.0 + v_focal * 5.0 + rng.gen_range(5.0..15.0);
                pedestrian_track([x, -6.0], [0.0, 1.0], rng.gen_range(1.0..1.8), n, t_obs, dt)
            }
            3 => {
                // neighbor-lane vehicle accelerating
                let v0 = rng.gen_range(5.0..9.0);
                track_along_path(
                    &l2_pts,
                    focal_start + rng.gen_range(-15.0..15.0),
                    Profile::Accelerate { v0, a: rng.gen_range(0.3..1.2), vmax: 20.0 },
                    n,
                    t_obs,
                    dt,
                )
            }
            _ => {
                // lane change from lane 2 into lane 1
                let v = rng.gen_range(7.0..12.0);
                let s0 = focal_start + rng.gen_range(-30.0..-10.0);
                let t1 = (n as f64 * 0.3) as usize;
                let t2 = (n as f64 * 0.7) as usize;
                let ss = arc_lengths(Profile::Const { v }, n + 1, dt);
                let blend = |t: usize| -> f64 {
                    if t <= t1 {
                        0.0
                    } else if t >= t2 {
                        1.0
                    } else {
                        let u = (t - t1) as f64 / (t2 - t1) as f64;
                        u * u * (3.0 - 2.0 * u)
                    }
                };
                let pos = |t: usize| -> [f64; 2] {
                    let a = path_point(&l2_pts, s0 + ss[t]);
                    let b = path_point(&l1_pts, s0 + ss[t]);
                    let w = blend(t);
                    [a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1])]
                };
                (0..n)
                    .map(|t| {
                        let p = pos(t);
                        let q = pos(t + 1);
                        let vx = (q[0] - p[0]) / dt;
                        let vy = (q[1] - p[1]) / dt;
                        AgentState { x: p[0], y: p[1], vx, vy, heading: vy.atan2(vx), observed: t < t_obs }
                    })
                    .collect()
            }
        };
        let agent_type = if i % 4 == 2 { AgentType::Pedestrian } else { AgentType::Vehicle };
        sc.tracks.push(AgentTrack { id: i as u64, agent_type, category: category_for(i), states });
    }
    sc
}

fn gen_curve(rng: &mut ChaCha8Rng, n_agents: usize, n: usize, t_obs: usize, dt: f64) -> Scenario {
    let mut sc = empty_scenario();
    let radius: f64 = rng.gen_range(20.0..80.0);
    // lateral acceleration cap keeps speeds drivable on tight arcs
    let v_focal = (0.5 * (3.0 * radius).sqrt()).clamp(3.0, 12.0);
    let center = [0.0, radius];
    let span = (v_focal * (n as f64 + 4.0) * dt + 30.0) / radius;
    let a0 = -std::f64::consts::FRAC_PI_2;
    let mut l1 = lane(
        1,
        arc_pts(center, radius, a0, a0 + span, 2.0),
        MarkingType::Dashed,
        MarkingType::Solid,
        false,
    );
    l1.left_neighbor = Some(2);
    let inner = (radius - 3.5).max(10.0);
    let mut l2 = lane(
        2,
        arc_pts(center, inner, a0, a0 + span, 2.0),
        MarkingType::Solid,
        MarkingType::Dashed,
        false,
    );
    l2.right_neighbor = Some(1);
    sc.lanes = vec![l1, l2];
    let l1_pts = sc.lanes[0].centerline.clone();
    let l2_pts = sc.lanes[1].centerline.clone();

    sc.tracks.push(AgentTrack {
        id: 0,
        agent_type: AgentType::Vehicle,
        category: TrackCategory::Focal,
        states: track_along_path(&l1_pts, 10.0, Profile::Const { v: v_focal }, n, t_obs, dt),
    });
    for i in 1..n_agents {
        let states = match i % 3 {
            1 => track_along_path(
                &l2_pts,
                10.0 + rng.gen_range(-8.0..12.0),
                Profile::Const { v: v_focal * rng.gen_range(0.8..1.1) },
                n,
                t_obs,
                dt,
            ),
            2 => {
                let p = path_point(&l1_pts, 10.0 + v_focal * 5.0 + rng.gen_range(5.0..12.0));
                pedestrian_track(
                    [p[0] + 4.0, p[1] - 4.0],
                    [-1.0, 1.0],
                    rng.gen_range(1.0..1.6),
                    n,
                    t_obs,
                    dt,
                )
            }
            _ => track_along_path(
                &l1_pts,
                10.0 + rng.gen_range(20.0..35.0),
                Profile::DecelStop { v0: v_focal, dec: rng.gen_range(0.4..1.0) },
                n,
                t_obs,
                dt,
            ),
        };
        let agent_type = if i % 3 == 2 { AgentType::Pedestrian } else { AgentType::Vehicle };
        sc.tracks.push(AgentTrack { id: i as u64, agent_type, category: category_for(i), states });
    }
    sc
}

fn rot(p: [f64; 2], k: usize) -> [f64; 2] {
    match k % 4 {
        0 => p,
        1 => [-p[1], p[0]],
        2 => [-p[0], -p[1]],
        _ => [p[1], -p[0]],
    }
}

fn gen_intersection(rng: &mut ChaCha8Rng, n_agents: usize, n: usize, t_obs: usize, dt: f64) -> Scenario {
    let mut sc = empty_scenario();
    // four legs, each rotated 90° CCW from the previous; leg 0 heads +x
    for k in 0..4 {
        let base = 10 * k as u64;
        let r = |p: [f64; 2]| rot(p, k);
        let approach: Vec<[f64; 2]> =
            straight_pts([-70.0, -1.75], [-8.0, -1.75], 5.0).iter().map(|&p| r(p)).collect();
        let through: Vec<[f64; 2]> =
            straight_pts([-8.0, -1.75], [8.0, -1.75], 4.0).iter().map(|&p| r(p)).collect();
        let exit: Vec<[f64; 2]> =
            straight_pts([8.0, -1.75], [70.0, -1.75], 5.0).iter().map(|&p| r(p)).collect();
        let turn: Vec<[f64; 2]> = arc_pts([-8.0, -8.0], 6.25, std::f64::consts::FRAC_PI_2, 0.0, 2.0)
            .iter()
            .map(|&p| r(p))
            .collect();
        let mut a = lane(base + 1, approach, MarkingType::None, MarkingType::Solid, false);
        a.successors = vec![base + 2, base + 4];
        let mut t = lane(base + 2, through, MarkingType::None, MarkingType::None, true);
        t.predecessors = vec![base + 1];
        t.successors = vec![base + 3];
        let mut e = lane(base + 3, exit, MarkingType::None, MarkingType::Solid, false);
        e.predecessors = vec![base + 2, 10 * (((k + 1) % 4) as u64) + 4];
        let mut rt = lane(base + 4, turn, MarkingType::None, MarkingType::None, true);
        rt.predecessors = vec![base + 1];
        rt.successors = vec![10 * (((k + 3) % 4) as u64) + 3];
        sc.lanes.extend([a, t, e, rt]);
    }

    // focal path on leg 0: straight through or right turn
    let turn_right = rng.gen_bool(0.4);
    let leg0_path = |turning: bool| -> Vec<[f64; 2]> {
        let mut pts = straight_pts([-70.0, -1.75], [-8.0, -1.75], 5.0);
        if turning {
            let arc = arc_pts([-8.0, -8.0], 6.25, std::f64::consts::FRAC_PI_2, 0.0, 2.0);
            pts.extend(arc.into_iter().skip(1));
            let exit3: Vec<[f64; 2]> = straight_pts([8.0, -1.75], [70.0, -1.75], 5.0)
                .iter()
                .map(|&p| rot(p, 3))
                .collect();
            pts.extend(exit3.into_iter().skip(1));
        } else {
            pts.extend(straight_pts([-8.0, -1.75], [8.0, -1.75], 4.0).into_iter().skip(1));
            pts.extend(straight_pts([8.0, -1.75], [70.0, -1.75], 5.0).into_iter().skip(1));
        }
        pts
    };
    let focal_path = leg0_path(turn_right);
    let v = rng.gen_range(5.0..9.0);
    // time the approach so the intersection is crossed inside the future window
    let s0 = 62.0 - v * (t_obs as f64 + rng.gen_range(1.0..4.0)) * dt;
    sc.tracks.push(AgentTrack {
        id: 0,
        agent_type: AgentType::Vehicle,
        category: TrackCategory::Focal,
        states: track_along_path(&focal_path, s0.max(0.0), Profile::Const { v }, n, t_obs, dt),
    });
    for i in 1..n_agents {
        let states = match i % 3 {
            1 => {
                // crossing traffic on another leg
                let leg = 1 + (i / 3) % 3;
                let path: Vec<[f64; 2]> = leg0_path(false).iter().map(|&p| rot(p, leg)).collect();
                let vv = rng.gen_range(5.0..10.0);
                let s = 62.0 - vv * (t_obs as f64 + rng.gen_range(-2.0..4.0)) * dt;
                track_along_path(&path, s.max(0.0), Profile::Const { v: vv }, n, t_obs, dt)
            }
            2 => pedestrian_track(
                [10.0, -8.0],
                [0.0, 1.0],
                rng.gen_range(1.0..1.7),
                n,
                t_obs,
                dt,
            ),
            _ => {
                // vehicle ahead of the focal agent stopping at the intersection
                let vv = rng.gen_range(4.0..7.0);
                track_along_path(
                    &focal_path,
                    (s0 + rng.gen_range(15.0..25.0)).max(0.0),
                    Profile::DecelStop { v0: vv, dec: rng.gen_range(0.6..1.2) },
                    n,
                    t_obs,
                    dt,
                )
            }
        };
        let agent_type = if i % 3 == 2 { AgentType::Pedestrian } else { AgentType::Vehicle };
        sc.tracks.push(AgentTrack { id: i as u64, agent_type, category: category_for(i), states });
    }
    sc
}
