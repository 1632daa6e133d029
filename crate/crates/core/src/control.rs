//! Instruction following: a kinematic pick-and-place simulator, iLQR over the
//! 7-D object/end-effector state, least-squares dynamics fitting, and the
//! detect-then-place pipeline.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SMatrix, SVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{propose_boxes, resolve_with_boxes, DetectorModels};
use crate::generator::{table_workspace, WhereModel};
use crate::geometry::{relation_oracle, Box3D, RelationKind, Vec3, DEFAULT_MARGIN};
use crate::grammar::{parse_instruction, SceneGraph};
use crate::voxel::SceneFeatureGrid;
use crate::{Error, Result};

pub const STATE_DIM: usize = 7;
pub const ACTION_DIM: usize = 4;
/// Per-axis bound on one step of end-effector motion, and on one yaw step in radians.
pub const MAX_STEP: f64 = 0.1;
/// The object is released once it is at most this far above its goal height...
pub const DROP_HEIGHT: f64 = 0.2;
/// ...and at most this far from the goal horizontally.
pub const RELEASE_RADIUS: f64 = 0.05;
pub const HORIZON: usize = 30;
/// Episodes start with the manipulandum grasped this far above its resting place.
pub const LIFT_HEIGHT: f64 = 1.0;
/// States are snapped to this lattice after every step so that repeated steps do not drift.
const LATTICE: f64 = 1e12;

pub type StateVec = SVector<f64, STATE_DIM>;
pub type ActionVec = SVector<f64, ACTION_DIM>;
pub type Gain = SMatrix<f64, ACTION_DIM, STATE_DIM>;

/// End-effector position relative to a grasped object's center.
pub fn grasp_offset() -> Vec3 {
    Vec3::new(0.0, 0.25, 0.0)
}

/// `x = [object (3), end effector (3), yaw]` plus the grasp flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacementState {
    pub x: StateVec,
    pub grasped: bool,
}

impl PlacementState {
    pub fn grasping(object: Vec3, yaw: f64) -> Self {
        let ee = object + grasp_offset();
        Self {
            x: StateVec::from_column_slice(&[object.x, object.y, object.z, ee.x, ee.y, ee.z, yaw]),
            grasped: true,
        }
    }

    pub fn object(&self) -> Vec3 {
        self.x.fixed_rows::<3>(0).into()
    }

    pub fn end_effector(&self) -> Vec3 {
        self.x.fixed_rows::<3>(3).into()
    }

    pub fn yaw(&self) -> f64 {
        self.x[6]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub x: StateVec,
}

impl GoalSpec {
    /// Object goal, end effector at the grasp offset above it, and the given yaw.
    pub fn for_object(object: Vec3, yaw: f64) -> Self {
        Self {
            x: PlacementState::grasping(object, yaw).x,
        }
    }

    pub fn object(&self) -> Vec3 {
        self.x.fixed_rows::<3>(0).into()
    }
}

/// Squared distance to the goal over all seven coordinates.
pub fn cost(x: &StateVec, g: &GoalSpec) -> f64 {
    (x - g.x).norm_squared()
}

pub fn clip_action(u: &ActionVec) -> ActionVec {
    u.map(|v| v.clamp(-MAX_STEP, MAX_STEP))
}

fn snap(x: StateVec) -> StateVec {
    x.map(|v| (v * LATTICE).round() / LATTICE)
}

/// Time-indexed transition model.
pub trait Dynamics {
    fn step(&self, t: usize, s: &PlacementState, u: &ActionVec) -> PlacementState;

    /// The same transition with discrete events (release) forced to match
    /// `like`. Linearisation differentiates this.
    fn step_like(&self, t: usize, s: &PlacementState, u: &ActionVec, like: &PlacementState) -> PlacementState {
        let _ = like;
        self.step(t, s, u)
    }

    /// The action actually applied for a requested one.
    fn admissible(&self, u: &ActionVec) -> ActionVec {
        *u
    }
}

/// Velocity-integrator arm holding one object. The object rides at the grasp
/// offset until it is brought over its goal, then drops to the table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Simulator {
    pub goal_object: Vec3,
    /// Center height of the object when it rests on the table.
    pub rest_height: f64,
}

impl Simulator {
    pub fn new(goal: &GoalSpec, rest_height: f64) -> Self {
        Self {
            goal_object: goal.object(),
            rest_height,
        }
    }

    fn releases(&self, object: &Vec3) -> bool {
        let d = object - self.goal_object;
        d.x.hypot(d.z) <= RELEASE_RADIUS && d.y <= DROP_HEIGHT
    }

    fn advance(&self, s: &PlacementState, u: &ActionVec, release: Option<bool>) -> PlacementState {
        let u = clip_action(u);
        let mut x = s.x;
        for k in 0..3 {
            x[3 + k] += u[k];
        }
        x[6] += u[3];
        let mut grasped = s.grasped;
        if grasped {
            let o = Vec3::new(x[3], x[4], x[5]) - grasp_offset();
            x[0] = o.x;
            x[1] = o.y;
            x[2] = o.z;
            if release.unwrap_or_else(|| self.releases(&o)) {
                grasped = false;
                x[1] = self.rest_height;
            }
        }
        PlacementState { x: snap(x), grasped }
    }
}

impl Dynamics for Simulator {
    fn step(&self, _t: usize, s: &PlacementState, u: &ActionVec) -> PlacementState {
        if clip_action(u) != *u {
            log::debug!("action {:?} clipped", u.as_slice());
        }
        self.advance(s, u, None)
    }

    fn step_like(&self, _t: usize, s: &PlacementState, u: &ActionVec, like: &PlacementState) -> PlacementState {
        self.advance(s, u, Some(s.grasped && !like.grasped))
    }

    fn admissible(&self, u: &ActionVec) -> ActionVec {
        clip_action(u)
    }
}

/// `x' = A x + B u + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineModel {
    pub a: SMatrix<f64, STATE_DIM, STATE_DIM>,
    pub b: SMatrix<f64, STATE_DIM, ACTION_DIM>,
    pub c: StateVec,
}

/// Per-timestep affine dynamics, optionally with the simulator's action bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineDynamics {
    pub models: Vec<AffineModel>,
    pub clip: bool,
}

impl Dynamics for AffineDynamics {
    fn step(&self, t: usize, s: &PlacementState, u: &ActionVec) -> PlacementState {
        let m = &self.models[t.min(self.models.len() - 1)];
        let u = self.admissible(u);
        PlacementState {
            x: m.a * s.x + m.b * u + m.c,
            grasped: s.grasped,
        }
    }

    fn admissible(&self, u: &ActionVec) -> ActionVec {
        if self.clip {
            clip_action(u)
        } else {
            *u
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IlqrConfig {
    pub max_iterations: usize,
    /// Stop once an accepted iteration lowers the total cost by less than this.
    pub tolerance: f64,
    /// Central-difference step for linearising the dynamics.
    pub fd_step: f64,
    /// Largest Quu regularisation tried before giving up.
    pub mu_max: f64,
    /// Line search tries `alpha = 1, 1/2, ...` this many times.
    pub line_search_steps: usize,
}

impl Default for IlqrConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-8,
            fd_step: 1e-5,
            mu_max: 1e6,
            line_search_steps: 7,
        }
    }
}

const MU_MIN: f64 = 1e-6;

/// Time-varying linear-Gaussian policy `u ~ N(K_t x + k_t, diag(sigma_t))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGains {
    pub feedback: Vec<Gain>,
    pub feedforward: Vec<ActionVec>,
    pub sigma: Vec<ActionVec>,
}

impl PolicyGains {
    pub fn mean_action(&self, t: usize, x: &StateVec) -> ActionVec {
        self.feedback[t] * x + self.feedforward[t]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IlqrSolution {
    pub gains: PolicyGains,
    /// Nominal trajectory, `T + 1` states.
    pub states: Vec<PlacementState>,
    pub actions: Vec<ActionVec>,
    pub cost: f64,
    /// Total cost of the initial rollout, then after each accepted iteration.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
}

/// Sum of the running cost over `x_1 .. x_T`.
pub fn trajectory_cost(states: &[PlacementState], g: &GoalSpec) -> f64 {
    states.iter().skip(1).map(|s| cost(&s.x, g)).sum()
}

pub fn rollout<D: Dynamics + ?Sized>(dynamics: &D, x0: &PlacementState, actions: &[ActionVec]) -> Vec<PlacementState> {
    let mut states = Vec::with_capacity(actions.len() + 1);
    states.push(*x0);
    for (t, u) in actions.iter().enumerate() {
        let next = dynamics.step(t, &states[t], u);
        states.push(next);
    }
    states
}

/// Executes the mean of `gains` from `x0`; returns states and applied actions.
pub fn rollout_policy<D: Dynamics + ?Sized>(dynamics: &D, x0: &PlacementState, gains: &PolicyGains) -> (Vec<PlacementState>, Vec<ActionVec>) {
    let mut states = vec![*x0];
    let mut actions = Vec::with_capacity(gains.feedback.len());
    for t in 0..gains.feedback.len() {
        let u = dynamics.admissible(&gains.mean_action(t, &states[t].x));
        states.push(dynamics.step(t, &states[t], &u));
        actions.push(u);
    }
    (states, actions)
}

type Jacobians = (SMatrix<f64, STATE_DIM, STATE_DIM>, SMatrix<f64, STATE_DIM, ACTION_DIM>);

fn linearize<D: Dynamics + ?Sized>(dynamics: &D, t: usize, s: &PlacementState, u: &ActionVec, next: &PlacementState, h: f64) -> Jacobians {
    let mut a = SMatrix::<f64, STATE_DIM, STATE_DIM>::zeros();
    for j in 0..STATE_DIM {
        let (mut sp, mut sm) = (*s, *s);
        sp.x[j] += h;
        sm.x[j] -= h;
        let d = (dynamics.step_like(t, &sp, u, next).x - dynamics.step_like(t, &sm, u, next).x) / (2.0 * h);
        a.set_column(j, &d);
    }
    let mut b = SMatrix::<f64, STATE_DIM, ACTION_DIM>::zeros();
    for j in 0..ACTION_DIM {
        let (mut up, mut um) = (*u, *u);
        up[j] += h;
        um[j] -= h;
        let d = (dynamics.step_like(t, s, &up, next).x - dynamics.step_like(t, s, &um, next).x) / (2.0 * h);
        b.set_column(j, &d);
    }
    (a, b)
}

struct Backward {
    feedback: Vec<Gain>,
    /// Action change along the line search direction.
    step: Vec<ActionVec>,
    sigma: Vec<ActionVec>,
}

/// Riccati recursion on the quadratic model; `None` if some regularised Quu is not positive definite.
fn backward_pass(jac: &[Jacobians], states: &[PlacementState], g: &GoalSpec, mu: f64) -> Option<Backward> {
    let horizon = jac.len();
    let eye = SMatrix::<f64, STATE_DIM, STATE_DIM>::identity();
    let mut vx = 2.0 * (states[horizon].x - g.x);
    let mut vxx = 2.0 * eye;
    let mut out = Backward {
        feedback: vec![Gain::zeros(); horizon],
        step: vec![ActionVec::zeros(); horizon],
        sigma: vec![ActionVec::zeros(); horizon],
    };
    for t in (0..horizon).rev() {
        let (a, b) = &jac[t];
        let (lx, lxx) = if t == 0 {
            (StateVec::zeros(), SMatrix::zeros())
        } else {
            (2.0 * (states[t].x - g.x), 2.0 * eye)
        };
        let qx = lx + a.transpose() * vx;
        let qu = b.transpose() * vx;
        let qxx = lxx + a.transpose() * vxx * a;
        let quu = b.transpose() * vxx * b;
        let qux = b.transpose() * vxx * a;
        let chol = (quu + SMatrix::<f64, ACTION_DIM, ACTION_DIM>::identity() * mu).cholesky()?;
        let k = -chol.solve(&qu);
        let kk = -chol.solve(&qux);
        vx = qx + kk.transpose() * quu * k + kk.transpose() * qu + qux.transpose() * k;
        vxx = qxx + kk.transpose() * quu * kk + kk.transpose() * qux + qux.transpose() * kk;
        vxx = 0.5 * (vxx + vxx.transpose());
        out.feedback[t] = kk;
        out.step[t] = k;
        out.sigma[t] = chol.inverse().diagonal();
    }
    Some(out)
}

/// Runs the backward pass, raising the regularisation until it succeeds.
fn regularised_backward(jac: &[Jacobians], states: &[PlacementState], g: &GoalSpec, mu: &mut f64, cfg: &IlqrConfig, iteration: usize) -> Result<Backward> {
    loop {
        if let Some(b) = backward_pass(jac, states, g, *mu) {
            return Ok(b);
        }
        *mu = (*mu * 10.0).max(MU_MIN);
        if *mu > cfg.mu_max {
            return Err(Error::RiccatiFailure { mu: *mu, iteration });
        }
    }
}

/// Iterative LQR from `x0` over `horizon` steps, starting from zero actions.
pub fn ilqr_solve<D: Dynamics + ?Sized>(x0: &PlacementState, g: &GoalSpec, horizon: usize, dynamics: &D, cfg: &IlqrConfig) -> Result<IlqrSolution> {
    if horizon == 0 {
        return Err(Error::Invalid("horizon must be at least 1".into()));
    }
    let mut actions = vec![ActionVec::zeros(); horizon];
    let mut states = rollout(dynamics, x0, &actions);
    let mut total = trajectory_cost(&states, g);
    let mut history = vec![total];
    let mut mu = 0.0;
    let mut iterations = 0;
    let linearise_all = |states: &[PlacementState], actions: &[ActionVec]| -> Vec<Jacobians> {
        (0..horizon)
            .map(|t| linearize(dynamics, t, &states[t], &actions[t], &states[t + 1], cfg.fd_step))
            .collect()
    };
    while iterations < cfg.max_iterations {
        iterations += 1;
        let jac = linearise_all(&states, &actions);
        let bw = regularised_backward(&jac, &states, g, &mut mu, cfg, iterations)?;
        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..cfg.line_search_steps {
            let mut xs = vec![*x0];
            let mut us = Vec::with_capacity(horizon);
            for t in 0..horizon {
                let u = actions[t] + alpha * bw.step[t] + bw.feedback[t] * (xs[t].x - states[t].x);
                let u = dynamics.admissible(&u);
                xs.push(dynamics.step(t, &xs[t], &u));
                us.push(u);
            }
            let j = trajectory_cost(&xs, g);
            if j < total {
                accepted = Some((xs, us, j));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xs, us, j)) = accepted else {
            log::debug!("ilqr: no descent at iteration {iterations}, cost {total:e}");
            break;
        };
        let improvement = total - j;
        states = xs;
        actions = us;
        total = j;
        history.push(total);
        mu /= 10.0;
        if mu < MU_MIN {
            mu = 0.0;
        }
        if improvement < cfg.tolerance {
            break;
        }
    }
    assert!(history.windows(2).all(|w| w[1] <= w[0]), "accepted iLQR costs increased");
    let jac = linearise_all(&states, &actions);
    let bw = regularised_backward(&jac, &states, g, &mut mu, cfg, iterations)?;
    let feedforward = (0..horizon).map(|t| actions[t] - bw.feedback[t] * states[t].x).collect();
    Ok(IlqrSolution {
        gains: PolicyGains {
            feedback: bw.feedback,
            feedforward,
            sigma: bw.sigma,
        },
        states,
        actions,
        cost: total,
        cost_history: history,
        iterations,
    })
}

/// One recorded trajectory of the true system.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub states: Vec<StateVec>,
    pub actions: Vec<ActionVec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedDynamics {
    pub dynamics: AffineDynamics,
    pub residual_rms: f64,
    /// Numerical rank of each timestep's regression design.
    pub ranks: Vec<usize>,
}

/// Rollouts from `x0` under uniform random admissible actions.
pub fn random_rollouts<D: Dynamics + ?Sized, R: Rng + ?Sized>(dynamics: &D, x0: &PlacementState, horizon: usize, n: usize, rng: &mut R) -> Vec<Rollout> {
    (0..n)
        .map(|_| {
            let actions: Vec<ActionVec> = (0..horizon).map(|_| ActionVec::from_fn(|_, _| rng.random_range(-MAX_STEP..=MAX_STEP))).collect();
            Rollout {
                states: rollout(dynamics, x0, &actions).iter().map(|s| s.x).collect(),
                actions,
            }
        })
        .collect()
}

/// Per-timestep least squares `x_{t+1} ~ A_t x_t + B_t u_t + c_t` across rollouts.
///
/// Fewer rollouts than unknowns is an error. Collinear regressors (a grasped
/// object moves in lockstep with the end effector) get the minimum-norm solution.
pub fn fit_linear_dynamics(rollouts: &[Rollout]) -> Result<FittedDynamics> {
    let unknowns = STATE_DIM + ACTION_DIM + 1;
    let horizon = rollouts.first().map_or(0, |r| r.actions.len());
    if horizon == 0 || rollouts.iter().any(|r| r.actions.len() != horizon || r.states.len() != horizon + 1) {
        return Err(Error::Invalid("rollouts must share a nonzero horizon".into()));
    }
    let n = rollouts.len();
    if n < unknowns {
        return Err(Error::RankDeficient {
            timestep: 0,
            rollouts: n,
            unknowns,
        });
    }
    let mut models = Vec::with_capacity(horizon);
    let mut ranks = Vec::with_capacity(horizon);
    let mut sq = 0.0;
    for t in 0..horizon {
        let x = DMatrix::from_fn(n, unknowns, |i, j| {
            let r = &rollouts[i];
            if j < STATE_DIM {
                r.states[t][j]
            } else if j < STATE_DIM + ACTION_DIM {
                r.actions[t][j - STATE_DIM]
            } else {
                1.0
            }
        });
        let y = DMatrix::from_fn(n, STATE_DIM, |i, j| rollouts[i].states[t + 1][j]);
        let svd = x.clone().svd(true, true);
        let eps = svd.singular_values.max() * 1e-10;
        ranks.push(svd.rank(eps));
        let w = svd.solve(&y, eps).map_err(|e| Error::Invalid(e.to_string()))?;
        sq += (&x * &w - &y).norm_squared();
        let wt = w.transpose();
        models.push(AffineModel {
            a: wt.fixed_view::<STATE_DIM, STATE_DIM>(0, 0).into_owned(),
            b: wt.fixed_view::<STATE_DIM, ACTION_DIM>(0, STATE_DIM).into_owned(),
            c: wt.fixed_view::<STATE_DIM, 1>(0, STATE_DIM + ACTION_DIM).into_owned(),
        });
    }
    Ok(FittedDynamics {
        dynamics: AffineDynamics { models, clip: false },
        residual_rms: (sq / (n * horizon * STATE_DIM) as f64).sqrt(),
        ranks,
    })
}

/// The model iLQR plans against. Execution always uses the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DynamicsSource {
    Known,
    /// Per-timestep affine fit to this many random rollouts from the start state.
    Fitted { rollouts: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FollowConfig {
    pub horizon: usize,
    pub ilqr: IlqrConfig,
    /// Goal draws tried before reporting the placement infeasible.
    pub goal_attempts: usize,
    pub dynamics: DynamicsSource,
}

impl Default for FollowConfig {
    fn default() -> Self {
        Self {
            horizon: HORIZON,
            ilqr: IlqrConfig::default(),
            goal_attempts: 100,
            dynamics: DynamicsSource::Known,
        }
    }
}

/// One executed placement.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub instruction: String,
    pub relation: RelationKind,
    pub subject: Box3D,
    pub anchor: Box3D,
    pub goal: GoalSpec,
    pub states: Vec<PlacementState>,
    pub actions: Vec<ActionVec>,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub success: bool,
}

impl Episode {
    /// Where the object ended up, as a box of its own size.
    pub fn final_box(&self) -> Box3D {
        Box3D::new(self.states.last().expect("nonempty trajectory").object(), self.subject.half_extent)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let b = |b: &Box3D| serde_json::json!({"center": b.center.as_slice(), "half_extent": b.half_extent.as_slice()});
        serde_json::json!({
            "instruction": self.instruction,
            "relation": self.relation,
            "resolved": {"subject": b(&self.subject), "anchor": b(&self.anchor)},
            "goal": {
                "object": &self.goal.x.as_slice()[0..3],
                "end_effector": &self.goal.x.as_slice()[3..6],
                "yaw": self.goal.x[6],
            },
            "final_object": self.states.last().map(|s| s.object().as_slice().to_vec()),
            "success": self.success,
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
        })
    }

    /// `t, x0..x6, u0..u3, cost`; the last row has no action.
    pub fn write_trajectory_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,x0,x1,x2,x3,x4,x5,x6,u0,u1,u2,u3,cost")?;
        for (t, s) in self.states.iter().enumerate() {
            let xs: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
            let us: Vec<String> = match self.actions.get(t) {
                Some(u) => u.iter().map(|v| v.to_string()).collect(),
                None => vec![String::new(); ACTION_DIM],
            };
            writeln!(w, "{t},{},{},{}", xs.join(","), us.join(","), cost(&s.x, &self.goal))?;
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.write_trajectory_csv(std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.csv")))?))?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&self.to_json())? + "\n")?;
        Ok(())
    }
}

/// Extra horizontal clearance demanded of goals, covering the one-voxel
/// quantisation of detected boxes.
pub const GOAL_CLEARANCE: f64 = 0.1;

/// Draws an object goal realising `rel` w.r.t. `anchor`, resting on the table
/// inside the workspace. The relation must hold with `GOAL_CLEARANCE` to spare:
/// centers are `DEFAULT_MARGIN + GOAL_CLEARANCE` apart, and a containee stays
/// that far inside the container's walls.
pub fn sample_goal<R: Rng + ?Sized>(rel: RelationKind, subject: &Box3D, anchor: &Box3D, where_: &WhereModel, attempts: usize, rng: &mut R) -> Result<Vec3> {
    let workspace = table_workspace();
    for _ in 0..attempts {
        let Some(off) = where_.sample(rel, &subject.half_extent, &anchor.half_extent, rng) else {
            break;
        };
        let mut center = anchor.center + off;
        center.y = subject.half_extent.y;
        let b = Box3D::new(center, subject.half_extent);
        let padded = Box3D::new(center, subject.half_extent + Vec3::new(GOAL_CLEARANCE, 0.0, GOAL_CLEARANCE));
        if workspace.contains_box(&b) && relation_oracle(rel, &padded, anchor, DEFAULT_MARGIN + GOAL_CLEARANCE) {
            return Ok(center);
        }
    }
    Err(Error::Infeasible { samples: attempts as u64 })
}

/// Moves `subject` so that it ends `rel` to `anchor`. A subject already held
/// in the air starts where it is; one on the table is first lifted by `LIFT_HEIGHT`.
pub fn place<R: Rng + ?Sized>(
    instruction: &str,
    rel: RelationKind,
    subject: &Box3D,
    anchor: &Box3D,
    where_: &WhereModel,
    cfg: &FollowConfig,
    rng: &mut R,
) -> Result<Episode> {
    let goal_object = sample_goal(rel, subject, anchor, where_, cfg.goal_attempts, rng)?;
    let goal = GoalSpec::for_object(goal_object, 0.0);
    let start = Vec3::new(
        subject.center.x,
        subject.center.y.max(subject.half_extent.y + LIFT_HEIGHT),
        subject.center.z,
    );
    let x0 = PlacementState::grasping(start, 0.0);
    let sim = Simulator::new(&goal, subject.half_extent.y);
    let sol = match cfg.dynamics {
        DynamicsSource::Known => ilqr_solve(&x0, &goal, cfg.horizon, &sim, &cfg.ilqr)?,
        DynamicsSource::Fitted { rollouts } => {
            let data = random_rollouts(&sim, &x0, cfg.horizon, rollouts, rng);
            let mut fitted = fit_linear_dynamics(&data)?.dynamics;
            fitted.clip = true;
            ilqr_solve(&x0, &goal, cfg.horizon, &fitted, &cfg.ilqr)?
        }
    };
    let (states, actions) = rollout_policy(&sim, &x0, &sol.gains);
    let last = states.last().expect("nonempty trajectory");
    let final_box = Box3D::new(last.object(), subject.half_extent);
    let success = !last.grasped && relation_oracle(rel, &final_box, anchor, DEFAULT_MARGIN);
    Ok(Episode {
        instruction: instruction.to_string(),
        relation: rel,
        subject: *subject,
        anchor: *anchor,
        goal,
        initial_cost: sol.cost_history[0],
        final_cost: trajectory_cost(&states, &goal),
        states,
        actions,
        iterations: sol.iterations,
        success,
    })
}

/// Detected boxes whose bottom is at most this high rest on the table.
pub const RESTING_CLEARANCE: f64 = 0.2;

/// Extends a detected box down to the table; undersides are never observed.
pub fn rest_on_table(b: &Box3D) -> Box3D {
    let (lo, hi) = (b.min(), b.max());
    let lo = Vec3::new(lo.x, 0.0_f64.min(lo.y), lo.z);
    Box3D::new((lo + hi) / 2.0, (hi - lo) / 2.0)
}

/// Parses a "put NP REL NP" command, grounds both phrases in `grid` and executes the placement.
pub fn follow_instruction<R: Rng + ?Sized>(
    utterance: &str,
    grid: &SceneFeatureGrid,
    models: &DetectorModels,
    where_: &WhereModel,
    cfg: &FollowConfig,
    rng: &mut R,
) -> Result<Episode> {
    let ins = parse_instruction(utterance)?;
    let graph = SceneGraph {
        nodes: vec![ins.subject, ins.anchor],
        edges: vec![],
    };
    let props = propose_boxes(grid);
    let det = resolve_with_boxes(&graph, grid, &props.boxes, models)?;
    let held = props.boxes[det.assignment[0]];
    let subject = if held.min().y <= RESTING_CLEARANCE { rest_on_table(&held) } else { held };
    let anchor = rest_on_table(&props.boxes[det.assignment[1]]);
    place(utterance, ins.relation, &subject, &anchor, where_, cfg, rng)
}
