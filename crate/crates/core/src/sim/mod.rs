//! Four-way intersection world: geometry, kinematics, IDM control, the ego
//! observe/act loop and robustness.

mod geometry;
mod idm;
mod policy;
mod route;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use geometry::{rect_distance, rects_overlap, OrientedRect, Vec2};
pub use idm::{idm_acceleration, IdmParams, Leader};
pub use policy::{ego_policy, PolicyParams};
pub use route::{Pose, Projection, Route, Turn};

use crate::error::{Error, Result};
use crate::prior::{resolve_start, InitialState, NoiseSequence, WorldStart, NOISE_STEPS};

/// Road branch the intruder enters from. The ego always enters from the south.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    South,
    North,
    West,
    East,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::South, Scenario::North, Scenario::West, Scenario::East];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::South => "south",
            Scenario::North => "north",
            Scenario::West => "west",
            Scenario::East => "east",
        }
    }

    /// Rotation taking the canonical (south) frame onto this branch.
    pub fn rotation(self) -> f64 {
        use std::f64::consts::{FRAC_PI_2, PI};
        match self {
            Scenario::South => 0.0,
            Scenario::East => FRAC_PI_2,
            Scenario::North => PI,
            Scenario::West => -FRAC_PI_2,
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "south" => Ok(Scenario::South),
            "north" => Ok(Scenario::North),
            "west" => Ok(Scenario::West),
            "east" => Ok(Scenario::East),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub lane_width: f64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    pub policy_dt: f64,
    pub substeps: usize,
    /// Recorded states per episode, including the initial one.
    pub horizon_steps: usize,
    pub ego_idm: IdmParams,
    /// Intruder IDM; `delta` is replaced by a per-episode draw.
    pub intruder_idm: IdmParams,
    pub intruder_delta_range: [f64; 2],
    /// Hard braking limit as a multiple of each vehicle's `a_max`.
    pub b_hard_factor: f64,
    /// Prior variance of the normalized observation error.
    pub gamma: f64,
    /// Length units per unit of normalized position error.
    pub obs_position_scale: f64,
    /// Speed units per unit of normalized velocity error.
    pub obs_velocity_scale: f64,
    pub ego_distance: [f64; 2],
    pub ego_speed: [f64; 2],
    pub intruder_distance: [f64; 2],
    pub intruder_speed: [f64; 2],
    /// Same-lane starts closer than this (centre to centre) are redrawn.
    pub min_initial_gap: f64,
    pub policy: PolicyParams,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            lane_width: 0.04,
            vehicle_length: 0.05,
            vehicle_width: 0.02,
            policy_dt: 0.125,
            substeps: 2,
            horizon_steps: 24,
            ego_idm: IdmParams {
                a_max: 0.5,
                b_comfort: 1.0,
                v0: 0.5,
                s_min: 0.01,
                time_headway: 0.3,
                delta: 4.0,
            },
            intruder_idm: IdmParams {
                a_max: 0.5,
                b_comfort: 1.0,
                v0: 0.45,
                s_min: 0.01,
                time_headway: 0.3,
                delta: 4.0,
            },
            intruder_delta_range: [2.0, 8.0],
            b_hard_factor: 3.0,
            gamma: 1.0 / 0.15,
            obs_position_scale: 0.007,
            obs_velocity_scale: 0.007,
            ego_distance: [0.35, 0.65],
            ego_speed: [0.35, 0.5],
            intruder_distance: [0.25, 0.45],
            intruder_speed: [0.35, 0.45],
            min_initial_gap: 0.1,
            policy: PolicyParams::default(),
        }
    }
}

fn check_range(name: &str, r: [f64; 2], min: f64) -> Result<()> {
    if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && r[0] >= min {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be an ordered interval above {min}, got {r:?}")))
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lane_width", self.lane_width),
            ("vehicle_length", self.vehicle_length),
            ("vehicle_width", self.vehicle_width),
            ("policy_dt", self.policy_dt),
            ("b_hard_factor", self.b_hard_factor),
            ("gamma", self.gamma),
            ("obs_position_scale", self.obs_position_scale),
            ("obs_velocity_scale", self.obs_velocity_scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        if self.horizon_steps != NOISE_STEPS + 1 {
            return Err(Error::Config(format!(
                "horizon_steps must be {} to match the {NOISE_STEPS}-step noise sequence",
                NOISE_STEPS + 1
            )));
        }
        self.ego_idm.validate()?;
        self.intruder_idm.validate()?;
        check_range("intruder_delta_range", self.intruder_delta_range, f64::MIN_POSITIVE)?;
        check_range("ego_distance", self.ego_distance, 0.0)?;
        check_range("ego_speed", self.ego_speed, 0.0)?;
        check_range("intruder_distance", self.intruder_distance, 0.0)?;
        check_range("intruder_speed", self.intruder_speed, 0.0)?;
        if !(self.min_initial_gap >= self.vehicle_length) {
            return Err(Error::Config("min_initial_gap must be at least one vehicle length".into()));
        }
        self.policy.validate(self)
    }

    fn b_hard(&self, idm: &IdmParams) -> f64 {
        self.b_hard_factor * idm.a_max
    }

    fn substep_dt(&self) -> f64 {
        self.policy_dt / self.substeps as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VehicleState {
    pub route: Route,
    /// Arc length along the route; negative before the intersection box.
    pub arc_progress: f64,
    pub speed: f64,
    pub position: Vec2,
    pub heading: f64,
}

impl VehicleState {
    pub fn on_route(route: Route, arc_progress: f64, speed: f64) -> Self {
        let pose = route.pose(arc_progress);
        Self {
            route,
            arc_progress,
            speed,
            position: pose.position,
            heading: pose.heading,
        }
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::from_angle(self.heading) * self.speed
    }

    pub fn footprint(&self, config: &WorldConfig) -> OrientedRect {
        OrientedRect {
            center: self.position,
            heading: self.heading,
            length: config.vehicle_length,
            width: config.vehicle_width,
        }
    }

    /// Semi-implicit Euler along the route: speed first, then position.
    fn advance(&self, accel: f64, dt: f64) -> Self {
        let speed = (self.speed + accel * dt).max(0.0);
        Self::on_route(self.route, self.arc_progress + speed * dt, speed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldState {
    pub ego: VehicleState,
    pub intruder: VehicleState,
    /// Intruder IDM with its per-episode exponent.
    pub intruder_idm: IdmParams,
}

/// Intruder state relative to the ego as perceived by the ego.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub rel_position: Vec2,
    pub rel_velocity: Vec2,
}

impl Observation {
    pub fn truth(state: &WorldState) -> Self {
        Self {
            rel_position: state.intruder.position - state.ego.position,
            rel_velocity: state.intruder.velocity() - state.ego.velocity(),
        }
    }

    /// True relative state plus scaled noise, channel order `[x, y, vx, vy]`.
    pub fn corrupted(state: &WorldState, eps: [f64; 4], config: &WorldConfig) -> Self {
        let t = Self::truth(state);
        let (ps, vs) = (config.obs_position_scale, config.obs_velocity_scale);
        Self {
            rel_position: t.rel_position + Vec2::new(eps[0] * ps, eps[1] * ps),
            rel_velocity: t.rel_velocity + Vec2::new(eps[2] * vs, eps[3] * vs),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.rel_position, self.rel_velocity]
            .iter()
            .all(|v| v.x.is_finite() && v.y.is_finite())
    }
}

pub fn separating_distance(ego: &VehicleState, intruder: &VehicleState, config: &WorldConfig) -> f64 {
    rect_distance(&ego.footprint(config), &intruder.footprint(config))
}

/// Intruder IDM: follows the ego when the ego is ahead in its own lane,
/// otherwise drives freely. It never yields at the intersection.
fn intruder_acceleration(state: &WorldState, config: &WorldConfig) -> f64 {
    let me = &state.intruder;
    let proj = me.route.project(state.ego.position);
    let ahead = proj.s - me.arc_progress;
    let leader = (proj.lateral <= config.lane_width / 2.0 && ahead > 0.0).then(|| Leader {
        gap: ahead - config.vehicle_length,
        speed: state.ego.velocity().dot(me.route.tangent(proj.s)).max(0.0),
    });
    idm_acceleration(me.speed, leader, &state.intruder_idm, config.b_hard(&state.intruder_idm))
        .expect("intruder state is finite by construction")
}

/// Advances the world by `dt` with a fixed ego acceleration. The intruder
/// acceleration comes from its own IDM and is held over the interval.
pub fn step_world(state: &WorldState, ego_accel: f64, dt: f64, config: &WorldConfig) -> Result<WorldState> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    if !ego_accel.is_finite() {
        return Err(Error::Domain(format!("ego acceleration must be finite, got {ego_accel}")));
    }
    let a_int = intruder_acceleration(state, config);
    Ok(WorldState {
        ego: state.ego.advance(ego_accel, dt),
        intruder: state.intruder.advance(a_int, dt),
        intruder_idm: state.intruder_idm,
    })
}

/// Per-episode randomness drawn from the behavior seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Behavior {
    pub ego_turn: Turn,
    pub intruder_turn: Turn,
    pub intruder_delta: f64,
    pub start: WorldStart,
}

fn draw_turn<R: Rng>(rng: &mut R) -> Turn {
    Turn::ALL[rng.random_range(0..Turn::ALL.len())]
}

pub fn draw_behavior(s0: &InitialState, scenario: Scenario, behavior_seed: u64, config: &WorldConfig) -> Result<Behavior> {
    let mut rng = ChaCha8Rng::seed_from_u64(behavior_seed);
    let ego_turn = draw_turn(&mut rng);
    let intruder_turn = draw_turn(&mut rng);
    let [lo, hi] = config.intruder_delta_range;
    let intruder_delta = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let start = resolve_start(s0, scenario, config, &mut rng)?;
    Ok(Behavior {
        ego_turn,
        intruder_turn,
        intruder_delta,
        start,
    })
}

/// World-frame (position, velocity) of ego and intruder at an absolute start.
pub fn start_poses(scenario: Scenario, start: &WorldStart, config: &WorldConfig) -> ((Vec2, Vec2), (Vec2, Vec2)) {
    let state = initial_world(scenario, start, Turn::Straight, Turn::Straight, config.intruder_idm, config);
    (
        (state.ego.position, state.ego.velocity()),
        (state.intruder.position, state.intruder.velocity()),
    )
}

fn initial_world(
    scenario: Scenario,
    start: &WorldStart,
    ego_turn: Turn,
    intruder_turn: Turn,
    intruder_idm: IdmParams,
    config: &WorldConfig,
) -> WorldState {
    let ego_route = Route::new(Scenario::South, ego_turn, config.lane_width);
    let int_route = Route::new(scenario, intruder_turn, config.lane_width);
    WorldState {
        ego: VehicleState::on_route(ego_route, -start.ego_distance, start.ego_speed),
        intruder: VehicleState::on_route(int_route, -start.intruder_distance, start.intruder_speed),
        intruder_idm,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub t: usize,
    pub ego: VehicleState,
    pub intruder: VehicleState,
    /// Minimum separation since the previous record (at the record itself for t = 0).
    pub sep: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationResult {
    pub trajectory: Vec<TrajectoryStep>,
    pub rho: f64,
    pub collided: bool,
    pub behavior_seed: u64,
    pub behavior: Behavior,
}

impl SimulationResult {
    /// Intruder position relative to the ego at every record, flattened `[x, y]`.
    pub fn relative_positions(&self) -> Vec<[f64; 2]> {
        self.trajectory
            .iter()
            .map(|s| {
                let d = s.intruder.position - s.ego.position;
                [d.x, d.y]
            })
            .collect()
    }

    /// Trajectory as JSON lines, one object per record.
    pub fn write_trajectory_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Car {
            x: f64,
            y: f64,
            v: f64,
        }
        #[derive(Serialize)]
        struct Line {
            t: usize,
            ego: Car,
            intruder: Car,
            sep: f64,
        }
        let car = |v: &VehicleState| Car {
            x: v.position.x,
            y: v.position.y,
            v: v.speed,
        };
        for s in &self.trajectory {
            let line = Line {
                t: s.t,
                ego: car(&s.ego),
                intruder: car(&s.intruder),
                sep: s.sep,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Runs one episode. The state freezes at the first overlap; separation is
/// tracked at every physics substep so that fast crossings are not missed.
pub fn run_simulation(
    s0: &InitialState,
    eps: &NoiseSequence,
    scenario: Scenario,
    behavior_seed: u64,
    config: &WorldConfig,
) -> Result<SimulationResult> {
    if eps.as_slice().len() != NOISE_STEPS * 4 {
        return Err(Error::Shape("noise sequence must be 23x4".into()));
    }
    let behavior = draw_behavior(s0, scenario, behavior_seed, config)?;
    let mut idm = config.intruder_idm;
    idm.delta = behavior.intruder_delta;
    let mut state = initial_world(
        scenario,
        &behavior.start,
        behavior.ego_turn,
        behavior.intruder_turn,
        idm,
        config,
    );
    let mut sep = separating_distance(&state.ego, &state.intruder, config);
    let mut collided = sep == 0.0;
    let mut rho = sep;
    let mut trajectory = Vec::with_capacity(config.horizon_steps);
    trajectory.push(TrajectoryStep {
        t: 0,
        ego: state.ego,
        intruder: state.intruder,
        sep,
    });
    let dt = config.substep_dt();
    for t in 0..NOISE_STEPS {
        if !collided {
            let obs = Observation::corrupted(&state, eps.step(t), config);
            let accel = ego_policy(&obs, &state.ego, config);
            sep = f64::INFINITY;
            for _ in 0..config.substeps {
                state = step_world(&state, accel, dt, config)?;
                let d = separating_distance(&state.ego, &state.intruder, config);
                sep = sep.min(d);
                if d == 0.0 {
                    collided = true;
                    break;
                }
            }
            rho = rho.min(sep);
        }
        trajectory.push(TrajectoryStep {
            t: t + 1,
            ego: state.ego,
            intruder: state.intruder,
            sep,
        });
    }
    Ok(SimulationResult {
        trajectory,
        rho,
        collided,
        behavior_seed,
        behavior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{relative_state, sample_initial_state, sample_prior_noise, PriorModel};

    fn cfg() -> WorldConfig {
        WorldConfig::default()
    }

    #[test]
    fn default_config_is_valid() {
        cfg().validate().unwrap();
    }

    #[test]
    fn scenario_round_trips_through_strings() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
    }

    #[test]
    fn free_step_matches_euler_update() {
        let c = cfg();
        let start = WorldStart {
            ego_distance: 0.5,
            ego_speed: 0.4,
            intruder_distance: 0.3,
            intruder_speed: 0.0,
        };
        let mut idm = c.intruder_idm;
        idm.delta = 4.0;
        let w = initial_world(Scenario::West, &start, Turn::Straight, Turn::Straight, idm, &c);
        let next = step_world(&w, 0.0, 0.0625, &c).unwrap();
        assert!((next.ego.position.y - (w.ego.position.y + 0.4 * 0.0625)).abs() < 1e-15);
        assert_eq!(next.ego.position.x, w.ego.position.x);

        let a = -0.2;
        let next = step_world(&w, a, 0.1, &c).unwrap();
        let v = 0.4 + a * 0.1;
        assert!((next.ego.speed - v).abs() < 1e-15);
        assert!((next.ego.arc_progress - (-0.5 + v * 0.1)).abs() < 1e-15);
        // intruder at rest, no leader: a_max * dt
        assert!((next.intruder.speed - c.intruder_idm.a_max * 0.1).abs() < 1e-15);
    }

    #[test]
    fn speed_never_goes_negative() {
        let c = cfg();
        let start = WorldStart {
            ego_distance: 0.5,
            ego_speed: 0.1,
            intruder_distance: 0.3,
            intruder_speed: 0.4,
        };
        let w = initial_world(Scenario::East, &start, Turn::Left, Turn::Left, c.intruder_idm, &c);
        let next = step_world(&w, -1.5, 0.125, &c).unwrap();
        assert_eq!(next.ego.speed, 0.0);
        assert_eq!(next.ego.arc_progress, w.ego.arc_progress);
    }

    #[test]
    fn zero_noise_observation_is_truth() {
        let c = cfg();
        let start = WorldStart {
            ego_distance: 0.4,
            ego_speed: 0.4,
            intruder_distance: 0.3,
            intruder_speed: 0.42,
        };
        let w = initial_world(Scenario::North, &start, Turn::Left, Turn::Right, c.intruder_idm, &c);
        assert_eq!(Observation::corrupted(&w, [0.0; 4], &c), Observation::truth(&w));
        let s0 = relative_state(Scenario::North, &start, &c);
        let t = Observation::truth(&w);
        assert!((t.rel_position.y - s0.y0).abs() < 1e-12);
        assert!((t.rel_velocity.y - s0.vy0).abs() < 1e-12);
    }

    #[test]
    fn simulation_is_deterministic_and_consistent() {
        let c = cfg();
        let prior = PriorModel::new(c.gamma * 25.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..200 {
            let sc = Scenario::ALL[i % 4];
            let s0 = sample_initial_state(sc, &c, &mut rng);
            let eps = sample_prior_noise(&prior, &mut rng);
            let a = run_simulation(&s0, &eps, sc, i as u64, &c).unwrap();
            let b = run_simulation(&s0, &eps, sc, i as u64, &c).unwrap();
            assert_eq!(a.rho.to_bits(), b.rho.to_bits());
            assert_eq!(a.trajectory, b.trajectory);
            assert_eq!(a.collided, a.rho == 0.0);
            assert_eq!(a.trajectory.len(), 24);
            let min = a.trajectory.iter().map(|s| s.sep).fold(f64::INFINITY, f64::min);
            assert_eq!(min, a.rho);
            for w in a.trajectory.windows(2) {
                assert!(w[1].ego.arc_progress >= w[0].ego.arc_progress);
                assert!(w[1].intruder.arc_progress >= w[0].intruder.arc_progress);
            }
        }
    }

    #[test]
    fn overlapping_start_collides_immediately() {
        let c = cfg();
        // same lane, same distance: resolved start puts both cars on top of each other
        let s0 = InitialState {
            x0: 0.0,
            y0: 0.0,
            vx0: 0.0,
            vy0: 0.0,
        };
        let r = run_simulation(&s0, &NoiseSequence::zeros(), Scenario::South, 1, &c).unwrap();
        assert!(r.collided);
        assert_eq!(r.rho, 0.0);
        assert_eq!(r.trajectory[0].sep, 0.0);
        assert_eq!(r.trajectory[23].ego, r.trajectory[0].ego);
    }

    #[test]
    fn trajectory_jsonl_has_one_line_per_record() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s0 = sample_initial_state(Scenario::East, &c, &mut rng);
        let r = run_simulation(&s0, &NoiseSequence::zeros(), Scenario::East, 3, &c).unwrap();
        let mut buf = Vec::new();
        r.write_trajectory_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 24);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["t"], 0);
        assert!(first["ego"]["v"].is_number());
    }
}
