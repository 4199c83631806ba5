//! Recovers model parameters and camera translation from keypoint
//! observations by staged first-order minimization of the total loss.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{check_dim, Error, Result};
use crate::losses::objective::{FreeGroups, Objective, Target3d, Terms};
use crate::losses::{
    FitVariables, KeypointObservation, LossReport, LossWeights, PixelNormalization,
    PriorDistribution,
};
use crate::metrics::procrustes_align;
use crate::model::{pose_mesh, rotation_log, ModelTemplate, Params, TORSO_KEYPOINTS};
use crate::synth::AnnotationRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer over a flat vector.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Adam {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// In-place update `x -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, x: &mut [f64], grad: &[f64], lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

/// Which observed keypoints a stage looks at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointSubset {
    All,
    /// Withers, shoulders and hips; falls back to all visible keypoints when
    /// fewer than [`MIN_SUBSET_VISIBLE`] of them are visible.
    Torso,
    Indices(Vec<usize>),
}

pub const MIN_SUBSET_VISIBLE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub name: String,
    pub free: FreeGroups,
    pub terms: Terms,
    pub keypoints: KeypointSubset,
    pub max_iterations: usize,
    pub step_size: f64,
    /// The step size decays along a cosine to this fraction of `step_size`.
    #[serde(default = "default_final_fraction")]
    pub final_step_fraction: f64,
}

fn default_final_fraction() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub stages: Vec<Stage>,
    pub adam: AdamConfig,
    /// Relative objective change over `tolerance_window` iterations that counts as converged.
    pub tolerance: f64,
    pub tolerance_window: usize,
    /// Restarts over canonical yaw angles, `2 pi k / n`.
    pub n_restarts: usize,
    /// Also start from a Procrustes alignment when 3D keypoints are observed.
    pub procrustes_restart: bool,
    pub min_visible: usize,
    pub init_translation: [f64; 3],
    pub weights: LossWeights,
    pub normalization: PixelNormalization,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            stages: vec![
                Stage {
                    name: "global".into(),
                    free: FreeGroups::global_only(),
                    terms: Terms {
                        l2d: true,
                        l3d: false,
                        prior: false,
                    },
                    keypoints: KeypointSubset::Torso,
                    max_iterations: 400,
                    step_size: 1e-2,
                    final_step_fraction: 0.01,
                },
                Stage {
                    name: "full".into(),
                    free: FreeGroups::all(),
                    terms: Terms::default(),
                    keypoints: KeypointSubset::All,
                    max_iterations: 1500,
                    step_size: 1e-2,
                    final_step_fraction: 0.01,
                },
            ],
            adam: AdamConfig::default(),
            tolerance: 1e-7,
            tolerance_window: 10,
            n_restarts: 4,
            procrustes_restart: true,
            min_visible: 6,
            init_translation: [0.0, 0.0, 6.0],
            weights: LossWeights::default(),
            normalization: PixelNormalization::ImageWidth,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidArgument(
                "fit schedule needs at least one stage".into(),
            ));
        }
        for s in &self.stages {
            if !(s.step_size > 0.0 && s.step_size.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "stage {} step size must be positive",
                    s.name
                )));
            }
            if !(s.final_step_fraction > 0.0 && s.final_step_fraction <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "stage {} final step fraction must be in (0, 1]",
                    s.name
                )));
            }
        }
        if self.n_restarts == 0 {
            return Err(Error::InvalidArgument(
                "n_restarts must be at least 1".into(),
            ));
        }
        self.weights.validate()
    }
}

/// What a fit sees: 2D keypoints with visibility, optional 3D keypoints, and
/// the camera intrinsics (its translation is ignored and estimated).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitObservation {
    pub keypoints2d: KeypointObservation,
    pub keypoints3d: Option<Vec<Vector3<f64>>>,
    pub camera: Camera,
}

impl FitObservation {
    pub fn from_record(record: &AnnotationRecord) -> Self {
        let mut camera = record.camera.to_camera();
        camera.translation = Vector3::zeros();
        FitObservation {
            keypoints2d: record.observation(),
            keypoints3d: record.keypoints3d(),
            camera,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: Params,
    pub camera_translation: Vector3<f64>,
    /// Full objective (all visible keypoints, prior, 3D when observed) at `params`.
    pub report: LossReport,
    /// Iterations run in each stage of the chosen restart.
    pub stage_iterations: Vec<usize>,
    /// Whether the last stage met the convergence tolerance.
    pub converged: bool,
    pub restart: usize,
    pub restart_objectives: Vec<f64>,
}

impl FitResult {
    pub fn variables(&self) -> FitVariables {
        FitVariables {
            params: self.params.clone(),
            camera_translation: self.camera_translation,
        }
    }
}

struct Problem<'a> {
    template: &'a ModelTemplate,
    prior: &'a PriorDistribution,
    observation: &'a FitObservation,
    config: &'a FitConfig,
}

impl<'a> Problem<'a> {
    fn subset(&self, which: &KeypointSubset) -> KeypointObservation {
        let obs = &self.observation.keypoints2d;
        let restricted = match which {
            KeypointSubset::All => return obs.clone(),
            KeypointSubset::Torso => obs.restricted_to(&TORSO_KEYPOINTS),
            KeypointSubset::Indices(ix) => obs.restricted_to(ix),
        };
        if restricted.n_visible() < MIN_SUBSET_VISIBLE {
            obs.clone()
        } else {
            restricted
        }
    }

    fn objective<'b>(&'b self, obs: &'b KeypointObservation, terms: Terms) -> Objective<'b> {
        Objective {
            template: self.template,
            camera: &self.observation.camera,
            observation: Some(obs),
            target3d: self.observation.keypoints3d.as_deref().map(|k| Target3d {
                keypoints3d: k,
                params: None,
            }),
            prior: Some(self.prior),
            weights: self.config.weights,
            normalization: self.config.normalization,
            terms,
        }
    }

    fn final_report(&self, vars: &FitVariables) -> Result<LossReport> {
        self.objective(&self.observation.keypoints2d, Terms::default())
            .value(vars)
    }

    /// Runs one stage from `start`; returns the best variables seen, the
    /// iteration count and whether the tolerance was met.
    fn run_stage(&self, stage: &Stage, start: FitVariables) -> Result<(FitVariables, usize, bool)> {
        let obs = self.subset(&stage.keypoints);
        let objective = self.objective(&obs, stage.terms);
        let mut x = start.to_flat();
        let mut vars = start;
        let mut adam = Adam::new(x.len(), self.config.adam);
        let mut best = (objective.value(&vars)?.total, vars.clone());
        let mut history: Vec<f64> = Vec::with_capacity(stage.max_iterations + 1);
        let mut lr_scale = 1.0;
        let window = self.config.tolerance_window.max(1);
        let n = stage.max_iterations;
        for it in 0..n {
            let (report, grad) = match objective.value_and_grad(&vars, &stage.free) {
                Ok(r) => r,
                Err(e @ Error::DimensionMismatch { .. }) => return Err(e),
                Err(_) => {
                    // Stepped somewhere invalid (e.g. behind the camera): go back and slow down.
                    vars = best.1.clone();
                    x = vars.to_flat();
                    adam = Adam::new(x.len(), self.config.adam);
                    lr_scale *= 0.5;
                    if lr_scale < 1e-6 {
                        return Ok((best.1, it, false));
                    }
                    continue;
                }
            };
            let f = report.total;
            if f < best.0 {
                best = (f, vars.clone());
            }
            history.push(f);
            if history.len() > window {
                let old = history[history.len() - 1 - window];
                if (old - f).abs() <= self.config.tolerance * f.abs() {
                    return Ok((best.1, it, true));
                }
            }
            let progress = it as f64 / n.max(1) as f64;
            let frac = stage.final_step_fraction;
            let lr = stage.step_size
                * lr_scale
                * (frac + (1.0 - frac) * 0.5 * (1.0 + (PI * progress).cos()));
            adam.step(&mut x, &grad, lr);
            vars.set_flat(&x)?;
        }
        if let Ok(r) = objective.value(&vars) {
            if r.total < best.0 {
                best = (r.total, vars);
            }
        }
        Ok((best.1, n, false))
    }

    fn run_schedule(&self, start: FitVariables) -> Result<(FitVariables, Vec<usize>, bool)> {
        let mut vars = start;
        let mut iters = Vec::with_capacity(self.config.stages.len());
        let mut converged = false;
        for stage in &self.config.stages {
            let (v, n, c) = self.run_stage(stage, vars)?;
            vars = v;
            iters.push(n);
            converged = c;
        }
        Ok((vars, iters, converged))
    }

    /// Starting points: canonical yaws, then the Procrustes start if available.
    fn starts(&self) -> Vec<FitVariables> {
        let mean = self.prior.mean_params();
        let base_t = Vector3::from(self.config.init_translation);
        let n = self.config.n_restarts;
        let mut out = Vec::with_capacity(n + 1);
        for k in 0..n {
            let mut params = mean.clone();
            // The body's vertical axis is y.
            let yaw = Matrix3::from(nalgebra::Rotation3::from_axis_angle(
                &Vector3::y_axis(),
                2.0 * PI * k as f64 / n as f64,
            ));
            let root =
                crate::model::rodrigues(&params.theta[0]).unwrap_or_else(|_| Matrix3::identity());
            params.theta[0] = rotation_log(&(yaw * root));
            out.push(self.with_translation_guess(params, base_t));
        }
        if self.config.procrustes_restart {
            if let Some(v) = self.procrustes_start(&mean, base_t) {
                out.push(v);
            }
        }
        out
    }

    /// Fills in the camera translation by linear least squares on the
    /// visible keypoints, keeping `fallback` when that is ill-posed.
    fn with_translation_guess(&self, params: Params, fallback: Vector3<f64>) -> FitVariables {
        let t = pose_mesh(self.template, &params)
            .ok()
            .and_then(|m| {
                solve_translation(
                    &m.keypoints3d,
                    &self.observation.keypoints2d,
                    &self.observation.camera,
                )
            })
            .filter(|t| t.z > 0.0 && t.iter().all(|c| c.is_finite()))
            .unwrap_or(fallback);
        FitVariables {
            params,
            camera_translation: t,
        }
    }

    fn procrustes_start(&self, mean: &Params, fallback: Vector3<f64>) -> Option<FitVariables> {
        let target = self.observation.keypoints3d.as_ref()?;
        let mut params = mean.clone();
        params.theta[0] = Vector3::zeros();
        let rest = pose_mesh(self.template, &params).ok()?;
        let sim = procrustes_align(&rest.keypoints3d, target).ok()?;
        let j0 = rest.joints[0];
        let r = sim.rotation;
        params.theta[0] = rotation_log(&r);
        // The root rotates about its own rest location, so the translation
        // that realizes `R x + t` is `t - J0 + R J0`.
        let t_rigid = target.iter().sum::<Vector3<f64>>() / target.len() as f64
            - r * (rest.keypoints3d.iter().sum::<Vector3<f64>>() / rest.keypoints3d.len() as f64);
        params.gamma = t_rigid - j0 + r * j0;
        Some(self.with_translation_guess(params, fallback))
    }
}

/// Least-squares camera translation making `points` project onto the visible
/// observed keypoints. `None` with fewer than two visible keypoints.
pub fn solve_translation(
    points: &[Vector3<f64>],
    observed: &KeypointObservation,
    camera: &Camera,
) -> Option<Vector3<f64>> {
    let c = camera.principal_point();
    let f = camera.focal;
    let rows: Vec<usize> = (0..points.len().min(observed.points.len()))
        .filter(|&k| observed.visible[k])
        .collect();
    if rows.len() < 2 {
        return None;
    }
    // f (X + Tx) = (u - cx)(Z + Tz), and the same for y.
    let mut a = DMatrix::zeros(2 * rows.len(), 3);
    let mut b = DVector::zeros(2 * rows.len());
    for (i, &k) in rows.iter().enumerate() {
        let p = points[k];
        let du = observed.points[k].x - c.x;
        let dv = observed.points[k].y - c.y;
        a[(2 * i, 0)] = f;
        a[(2 * i, 2)] = -du;
        b[2 * i] = du * p.z - f * p.x;
        a[(2 * i + 1, 1)] = f;
        a[(2 * i + 1, 2)] = -dv;
        b[2 * i + 1] = dv * p.z - f * p.y;
    }
    let ata = a.transpose() * &a;
    let atb = a.transpose() * b;
    let sol = ata.cholesky()?.solve(&atb);
    Some(Vector3::new(sol[0], sol[1], sol[2]))
}

fn check_observation(
    observation: &FitObservation,
    template: &ModelTemplate,
    config: &FitConfig,
) -> Result<()> {
    config.validate()?;
    observation.camera.validate()?;
    check_dim(
        "keypoints2d",
        template.n_keypoints(),
        observation.keypoints2d.points.len(),
    )?;
    check_dim(
        "visibility",
        template.n_keypoints(),
        observation.keypoints2d.visible.len(),
    )?;
    if let Some(k) = &observation.keypoints3d {
        check_dim("keypoints3d", template.n_keypoints(), k.len())?;
    }
    let visible = observation.keypoints2d.n_visible();
    if visible < config.min_visible {
        return Err(Error::TooFewObservations {
            visible,
            required: config.min_visible,
        });
    }
    Ok(())
}

/// Fits from the configured restarts and keeps the lowest final objective.
pub fn fit(
    observation: &FitObservation,
    template: &ModelTemplate,
    prior: &PriorDistribution,
    config: &FitConfig,
) -> Result<FitResult> {
    check_observation(observation, template, config)?;
    check_dim("prior beta", template.n_beta(), prior.n_beta())?;
    check_dim("prior joints", template.n_joints(), prior.n_joints())?;
    let problem = Problem {
        template,
        prior,
        observation,
        config,
    };
    let mut best: Option<FitResult> = None;
    let mut objectives = Vec::new();
    for (k, start) in problem.starts().into_iter().enumerate() {
        if problem.final_report(&start).is_err() {
            objectives.push(f64::NAN);
            continue;
        }
        let (vars, iters, converged) = problem.run_schedule(start)?;
        let report = problem.final_report(&vars)?;
        objectives.push(report.total);
        if best
            .as_ref()
            .map_or(true, |b| report.total < b.report.total)
        {
            best = Some(FitResult {
                params: vars.params,
                camera_translation: vars.camera_translation,
                report,
                stage_iterations: iters,
                converged,
                restart: k,
                restart_objectives: Vec::new(),
            });
        }
    }
    let mut result =
        best.ok_or_else(|| Error::NonFinite("objective at every initialization".into()))?;
    result.restart_objectives = objectives;
    Ok(result)
}

/// Fits from a single given starting point.
pub fn fit_from(
    observation: &FitObservation,
    template: &ModelTemplate,
    prior: &PriorDistribution,
    config: &FitConfig,
    start: FitVariables,
) -> Result<FitResult> {
    check_observation(observation, template, config)?;
    start.params.check(template)?;
    let problem = Problem {
        template,
        prior,
        observation,
        config,
    };
    problem.final_report(&start)?;
    let (vars, iters, converged) = problem.run_schedule(start)?;
    let report = problem.final_report(&vars)?;
    Ok(FitResult {
        params: vars.params,
        camera_translation: vars.camera_translation,
        report,
        stage_iterations: iters,
        converged,
        restart: 0,
        restart_objectives: vec![report.total],
    })
}

/// Independent fits, in input order; a failing item does not stop the rest.
pub fn batch_fit(
    observations: &[FitObservation],
    template: &ModelTemplate,
    prior: &PriorDistribution,
    config: &FitConfig,
) -> Vec<Result<FitResult>> {
    observations
        .par_iter()
        .map(|o| fit(o, template, prior, config))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::make_toy_prior;
    use crate::model::{make_toy_template, ToyConfig};

    fn small() -> (ModelTemplate, PriorDistribution) {
        let t = make_toy_template(&ToyConfig {
            ring_sides: 6,
            rings_per_bone: 3,
            ..Default::default()
        })
        .unwrap();
        let p = make_toy_prior(t.n_beta(), t.n_joints(), 0.3).unwrap();
        (t, p)
    }

    fn observe(
        t: &ModelTemplate,
        params: &Params,
        translation: Vector3<f64>,
        with_3d: bool,
    ) -> FitObservation {
        let mesh = pose_mesh(t, params).unwrap();
        let cam = Camera::with_translation(translation);
        let pts = cam
            .project(&mesh.keypoints3d)
            .iter()
            .map(|p| p.pixel)
            .collect();
        FitObservation {
            keypoints2d: KeypointObservation::new(pts, vec![true; t.n_keypoints()]).unwrap(),
            keypoints3d: with_3d.then_some(mesh.keypoints3d),
            camera: Camera::default(),
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, AdamConfig::default());
        for _ in 0..2000 {
            let g = vec![2.0 * x[0], 8.0 * x[1]];
            opt.step(&mut x, &g, 1e-2);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn first_adam_step_has_size_lr() {
        let mut x = vec![0.0, 0.0];
        let mut opt = Adam::new(2, AdamConfig::default());
        opt.step(&mut x, &[5.0, -0.01], 0.1);
        assert!((x[0] + 0.1).abs() < 1e-6 && (x[1] - 0.1).abs() < 1e-4);
    }

    #[test]
    fn translation_solve_is_exact_without_noise() {
        let (t, _) = small();
        let params = Params::zeros(&t);
        let truth = Vector3::new(0.2, -0.1, 5.5);
        let obs = observe(&t, &params, truth, false);
        let mesh = pose_mesh(&t, &params).unwrap();
        let got = solve_translation(&mesh.keypoints3d, &obs.keypoints2d, &obs.camera).unwrap();
        assert!((got - truth).amax() < 1e-9);
    }

    #[test]
    fn too_few_keypoints() {
        let (t, p) = small();
        let mut obs = observe(&t, &Params::zeros(&t), Vector3::new(0.0, 0.0, 6.0), false);
        for (i, v) in obs.keypoints2d.visible.iter_mut().enumerate() {
            *v = i < 3;
        }
        assert!(matches!(
            fit(&obs, &t, &p, &FitConfig::default()),
            Err(Error::TooFewObservations {
                visible: 3,
                required: 6
            })
        ));
    }

    #[test]
    fn fixed_point_is_kept() {
        let (t, p) = small();
        let truth = p.mean_params();
        let translation = Vector3::new(0.1, 0.05, 6.0);
        let obs = observe(&t, &truth, translation, true);
        let start = FitVariables {
            params: truth.clone(),
            camera_translation: translation,
        };
        let r = fit_from(&obs, &t, &p, &FitConfig::default(), start.clone()).unwrap();
        assert!(r.converged);
        assert!(
            r.stage_iterations.iter().all(|n| *n <= 10),
            "{:?}",
            r.stage_iterations
        );
        let diff = r
            .variables()
            .to_flat()
            .iter()
            .zip(start.to_flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-6);
    }

    #[test]
    fn prior_pull_without_keypoint_weight() {
        let (t, p) = small();
        let mut start = FitVariables {
            params: p.mean_params(),
            camera_translation: Vector3::new(0.0, 0.0, 6.0),
        };
        start.params.beta[2] = 0.4;
        start.params.theta[5] = Vector3::new(0.2, -0.1, 0.3);
        start.params.theta[0] = Vector3::new(0.0, 0.5, 0.0);
        let obs = observe(&t, &start.params, start.camera_translation, false);
        let config = FitConfig {
            weights: LossWeights {
                lambda_2d: 0.0,
                ..Default::default()
            },
            stages: vec![Stage {
                name: "prior".into(),
                free: FreeGroups::all(),
                terms: Terms::default(),
                keypoints: KeypointSubset::All,
                max_iterations: 3000,
                step_size: 1e-2,
                final_step_fraction: 0.01,
            }],
            ..Default::default()
        };
        let r = fit_from(&obs, &t, &p, &config, start).unwrap();
        let mean = p.mean_params();
        let dev = r
            .params
            .beta
            .iter()
            .zip(&mean.beta)
            .map(|(a, b)| (a - b).abs())
            .chain(
                r.params
                    .theta
                    .iter()
                    .zip(&mean.theta)
                    .map(|(a, b)| (a - b).amax()),
            )
            .fold(0.0, f64::max);
        assert!(dev <= 1e-4, "max deviation from the prior mean {dev}");
    }

    #[test]
    fn recovers_a_posed_scene_from_2d_and_3d() {
        let (t, p) = small();
        let mut truth = p.mean_params();
        truth.theta[0] = Vector3::new(0.3, 2.0, -0.2);
        truth.theta[9] = Vector3::new(0.0, 0.0, 0.4);
        truth.theta[17] = Vector3::new(0.0, 0.0, -0.3);
        truth.beta[0] = 0.2;
        let translation = Vector3::new(0.2, -0.1, 5.0);
        let obs = observe(&t, &truth, translation, true);
        let r = fit(&obs, &t, &p, &FitConfig::default()).unwrap();
        let mesh = pose_mesh(&t, &r.params).unwrap();
        let cam = Camera::with_translation(r.camera_translation);
        let reproj = cam
            .project(&mesh.keypoints3d)
            .iter()
            .zip(&obs.keypoints2d.points)
            .map(|(a, b)| (a.pixel - b).norm())
            .sum::<f64>()
            / 26.0;
        assert!(reproj < 2.0, "mean reprojection error {reproj}");
        let gt = obs.keypoints3d.as_ref().unwrap();
        let pa = crate::metrics::pa_mpjpe(&mesh.keypoints3d, gt).unwrap();
        assert!(pa < 0.02, "pa-mpjpe {pa}");
        let recomputed = r.report.total;
        let again = Problem {
            template: &t,
            prior: &p,
            observation: &obs,
            config: &FitConfig::default(),
        }
        .final_report(&r.variables())
        .unwrap();
        assert!((recomputed - again.total).abs() < 1e-9);
    }

    #[test]
    fn batch_matches_single_fits_and_isolates_errors() {
        let (t, p) = small();
        let config = FitConfig {
            n_restarts: 1,
            ..Default::default()
        };
        let good = observe(&t, &p.mean_params(), Vector3::new(0.0, 0.0, 6.0), false);
        let mut bad = good.clone();
        bad.keypoints2d.visible = vec![false; 26];
        let batch = batch_fit(&[good.clone(), bad], &t, &p, &config);
        assert_eq!(
            batch[0].as_ref().unwrap(),
            &fit(&good, &t, &p, &config).unwrap()
        );
        assert!(batch[1].is_err());
    }
}
