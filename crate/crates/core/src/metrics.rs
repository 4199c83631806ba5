//! Procrustes-aligned position errors and keypoint accuracy curves.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{KP_NOSE, KP_TAIL_ROOT};

/// `y ~ scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }

    pub fn apply_all(&self, xs: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        xs.iter().map(|x| self.apply(x)).collect()
    }
}

fn centroid(xs: &[Vector3<f64>]) -> Vector3<f64> {
    xs.iter().sum::<Vector3<f64>>() / xs.len() as f64
}

/// Least-squares similarity taking `x` onto `y` (Umeyama), reflections excluded.
pub fn procrustes_align(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> Result<Similarity> {
    check_dim("procrustes points", x.len(), y.len())?;
    if x.len() < 3 {
        return Err(Error::Degenerate(format!(
            "procrustes needs at least 3 points, got {}",
            x.len()
        )));
    }
    if !x.iter().chain(y).all(|p| p.iter().all(|c| c.is_finite())) {
        return Err(Error::NonFinite("procrustes input".into()));
    }
    let mx = centroid(x);
    let my = centroid(y);
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    let mut scatter = Matrix3::zeros();
    for (a, b) in x.iter().zip(y) {
        let xa = a - mx;
        cov += (b - my) * xa.transpose();
        scatter += xa * xa.transpose();
        var_x += xa.norm_squared();
    }
    // Rank of the centered source points.
    let sx = scatter.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sx.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Degenerate(
            "source points are collinear or coincident".into(),
        ));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    // Singular values come unsorted; the sign flip must hit the smallest.
    let sv = svd.singular_values;
    let smallest = (0..3).min_by(|&a, &b| sv[a].total_cmp(&sv[b])).unwrap();
    let mut flip = Matrix3::identity();
    if d[(2, 2)] < 0.0 {
        flip[(smallest, smallest)] = -1.0;
    }
    let rotation = u * flip * v_t;
    let trace: f64 = (0..3).map(|i| sv[i] * flip[(i, i)]).sum();
    let scale = trace / var_x;
    let translation = my - scale * rotation * mx;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

fn mean_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len() as f64
}

/// Mean per-point Euclidean error after aligning `pred` onto `gt`.
pub fn pa_mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    let sim = procrustes_align(pred, gt)?;
    Ok(mean_distance(&sim.apply_all(pred), gt))
}

/// Same as [`pa_mpjpe`], over mesh vertices.
pub fn pa_mpvpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    pa_mpjpe(pred, gt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PckMode {
    /// Threshold is half the ground-truth head-to-tail distance.
    Hth,
    /// Threshold is `fraction * normalizer`.
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalizer {
    /// Larger side of the bounding box of the visible ground-truth keypoints.
    #[default]
    BboxMaxSide,
    /// Ground-truth head-to-tail distance.
    Hth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PckSpec {
    pub mode: PckMode,
    pub normalizer: Normalizer,
    pub head: usize,
    pub tail: usize,
}

impl PckSpec {
    pub fn hth() -> Self {
        PckSpec {
            mode: PckMode::Hth,
            normalizer: Normalizer::Hth,
            head: KP_NOSE,
            tail: KP_TAIL_ROOT,
        }
    }

    pub fn fraction(f: f64) -> Self {
        PckSpec {
            mode: PckMode::Fraction(f),
            normalizer: Normalizer::BboxMaxSide,
            head: KP_NOSE,
            tail: KP_TAIL_ROOT,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if let PckMode::Fraction(f) = self.mode {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "PCK fraction must be in (0, 1], got {f}"
                )));
            }
        }
        let needs_hth = self.mode == PckMode::Hth || self.normalizer == Normalizer::Hth;
        if needs_hth && (self.head >= n || self.tail >= n) {
            return Err(Error::InvalidArgument(format!(
                "head/tail indices {}/{} out of range for {n} keypoints",
                self.head, self.tail
            )));
        }
        Ok(())
    }
}

fn check_2d(pred: &[Vector2<f64>], gt: &[Vector2<f64>], visible: &[bool]) -> Result<()> {
    check_dim("predicted keypoints", gt.len(), pred.len())?;
    check_dim("visibility", gt.len(), visible.len())?;
    if !visible.iter().any(|v| *v) {
        return Err(Error::EmptyObservation);
    }
    Ok(())
}

/// Reference length for normalized thresholds; `None` when it needs an
/// invisible head or tail keypoint.
pub fn normalizer_length(
    gt: &[Vector2<f64>],
    visible: &[bool],
    normalizer: Normalizer,
    head: usize,
    tail: usize,
) -> Option<f64> {
    match normalizer {
        Normalizer::BboxMaxSide => {
            let pts: Vec<_> = gt
                .iter()
                .zip(visible)
                .filter(|(_, v)| **v)
                .map(|(p, _)| p)
                .collect();
            if pts.is_empty() {
                return None;
            }
            let min = pts
                .iter()
                .fold(Vector2::repeat(f64::INFINITY), |m, p| m.inf(p));
            let max = pts
                .iter()
                .fold(Vector2::repeat(f64::NEG_INFINITY), |m, p| m.sup(p));
            Some((max - min).max())
        }
        Normalizer::Hth => (visible.get(head) == Some(&true) && visible.get(tail) == Some(&true))
            .then(|| (gt[head] - gt[tail]).norm()),
    }
}

/// Fraction of visible keypoints with pixel error strictly below the threshold.
///
/// `Ok(None)` is the skip flag for instances whose reference keypoints are invisible.
pub fn pck(
    pred: &[Vector2<f64>],
    gt: &[Vector2<f64>],
    visible: &[bool],
    spec: &PckSpec,
) -> Result<Option<f64>> {
    check_2d(pred, gt, visible)?;
    spec.validate(gt.len())?;
    let threshold = match spec.mode {
        PckMode::Hth => {
            normalizer_length(gt, visible, Normalizer::Hth, spec.head, spec.tail).map(|d| 0.5 * d)
        }
        PckMode::Fraction(f) => {
            normalizer_length(gt, visible, spec.normalizer, spec.head, spec.tail).map(|d| f * d)
        }
    };
    Ok(threshold.map(|thr| pck_at(pred, gt, visible, thr)))
}

/// PCK with an explicit pixel threshold.
pub fn pck_at(pred: &[Vector2<f64>], gt: &[Vector2<f64>], visible: &[bool], threshold: f64) -> f64 {
    let mut hit = 0usize;
    let mut n = 0usize;
    for ((p, g), v) in pred.iter().zip(gt).zip(visible) {
        if *v {
            n += 1;
            if (p - g).norm() < threshold {
                hit += 1;
            }
        }
    }
    hit as f64 / n as f64
}

pub const AUC_STEPS: usize = 100;

/// Trapezoidal area under PCK(t) for normalized thresholds `t = i / 100`, `i = 0..=100`.
///
/// A keypoint counts as correct at `t` when its normalized error is at most `t`,
/// so a perfect prediction scores 1.
pub fn auc(
    pred: &[Vector2<f64>],
    gt: &[Vector2<f64>],
    visible: &[bool],
    normalizer: f64,
) -> Result<f64> {
    check_2d(pred, gt, visible)?;
    if !(normalizer > 0.0 && normalizer.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "AUC normalizer must be positive, got {normalizer}"
        )));
    }
    let errors: Vec<f64> = pred
        .iter()
        .zip(gt)
        .zip(visible)
        .filter(|(_, v)| **v)
        .map(|((p, g), _)| (p - g).norm() / normalizer)
        .collect();
    let curve: Vec<f64> = (0..=AUC_STEPS)
        .map(|i| {
            let t = i as f64 / AUC_STEPS as f64;
            errors.iter().filter(|e| **e <= t).count() as f64 / errors.len() as f64
        })
        .collect();
    let twice: f64 = curve.windows(2).map(|w| w[0] + w[1]).sum();
    Ok(twice / (2 * AUC_STEPS) as f64)
}

/// Everything evaluated for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub pa_mpjpe: f64,
    pub pa_mpvpe: Option<f64>,
    pub pck_hth: Option<f64>,
    pub pck_010: f64,
    pub pck_015: f64,
    pub auc: f64,
}

/// Prediction or ground truth for one instance.
#[derive(Debug, Clone, Copy)]
pub struct InstanceData<'a> {
    pub keypoints3d: &'a [Vector3<f64>],
    pub vertices: Option<&'a [Vector3<f64>]>,
    pub keypoints2d: &'a [Vector2<f64>],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub normalizer: Normalizer,
    pub head: usize,
    pub tail: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            normalizer: Normalizer::BboxMaxSide,
            head: KP_NOSE,
            tail: KP_TAIL_ROOT,
        }
    }
}

pub fn evaluate_instance(
    pred: &InstanceData<'_>,
    gt: &InstanceData<'_>,
    visible: &[bool],
    config: &EvalConfig,
) -> Result<InstanceMetrics> {
    let pa_mpjpe = pa_mpjpe(pred.keypoints3d, gt.keypoints3d)?;
    let pa_mpvpe = match (pred.vertices, gt.vertices) {
        (Some(p), Some(g)) => Some(pa_mpvpe(p, g)?),
        _ => None,
    };
    let (p2, g2) = (pred.keypoints2d, gt.keypoints2d);
    let pck_hth = pck(
        p2,
        g2,
        visible,
        &PckSpec {
            head: config.head,
            tail: config.tail,
            ..PckSpec::hth()
        },
    )?;
    let frac = |f: f64| -> Result<f64> {
        let spec = PckSpec {
            mode: PckMode::Fraction(f),
            normalizer: config.normalizer,
            head: config.head,
            tail: config.tail,
        };
        pck(p2, g2, visible, &spec)?.ok_or_else(|| {
            Error::Degenerate("head or tail keypoint invisible for the HTH normalizer".into())
        })
    };
    let norm = normalizer_length(g2, visible, config.normalizer, config.head, config.tail)
        .ok_or_else(|| Error::Degenerate("normalizer unavailable".into()))?;
    Ok(InstanceMetrics {
        pa_mpjpe,
        pa_mpvpe,
        pck_hth,
        pck_010: frac(0.1)?,
        pck_015: frac(0.15)?,
        auc: auc(p2, g2, visible, norm)?,
    })
}

/// Averages over instances, each weighted equally.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pa_mpjpe: f64,
    pub pa_mpvpe: Option<f64>,
    pub pck_hth: Option<f64>,
    pub pck_010: f64,
    pub pck_015: f64,
    pub auc: f64,
    pub n_instances: usize,
    /// Instances left out of the HTH average because head or tail was invisible.
    pub n_hth_skipped: usize,
}

/// Running sums for [`MetricsReport`]; merging is associative.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricsAccumulator {
    n: usize,
    pa_mpjpe: f64,
    pa_mpvpe: f64,
    n_mpvpe: usize,
    pck_hth: f64,
    n_hth: usize,
    pck_010: f64,
    pck_015: f64,
    auc: f64,
}

impl MetricsAccumulator {
    pub fn push(&mut self, m: &InstanceMetrics) {
        self.n += 1;
        self.pa_mpjpe += m.pa_mpjpe;
        if let Some(v) = m.pa_mpvpe {
            self.pa_mpvpe += v;
            self.n_mpvpe += 1;
        }
        if let Some(v) = m.pck_hth {
            self.pck_hth += v;
            self.n_hth += 1;
        }
        self.pck_010 += m.pck_010;
        self.pck_015 += m.pck_015;
        self.auc += m.auc;
    }

    pub fn merge(mut self, other: &Self) -> Self {
        self.n += other.n;
        self.pa_mpjpe += other.pa_mpjpe;
        self.pa_mpvpe += other.pa_mpvpe;
        self.n_mpvpe += other.n_mpvpe;
        self.pck_hth += other.pck_hth;
        self.n_hth += other.n_hth;
        self.pck_010 += other.pck_010;
        self.pck_015 += other.pck_015;
        self.auc += other.auc;
        self
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("no instances to report".into()));
        }
        let n = self.n as f64;
        Ok(MetricsReport {
            pa_mpjpe: self.pa_mpjpe / n,
            pa_mpvpe: (self.n_mpvpe > 0).then(|| self.pa_mpvpe / self.n_mpvpe as f64),
            pck_hth: (self.n_hth > 0).then(|| self.pck_hth / self.n_hth as f64),
            pck_010: self.pck_010 / n,
            pck_015: self.pck_015 / n,
            auc: self.auc / n,
            n_instances: self.n,
            n_hth_skipped: self.n - self.n_hth,
        })
    }
}

pub fn aggregate_metrics(instances: &[InstanceMetrics]) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::default();
    for m in instances {
        acc.push(m);
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::rodrigues;
    use proptest::prelude::*;

    fn oracle_points() -> Vec<Vector3<f64>> {
        [
            [0.0, 0.0, 0.0],
            [0.3, 0.1, 0.0],
            [0.6, 0.05, 0.1],
            [0.9, -0.2, 0.05],
            [1.1, -0.4, 0.0],
            [0.2, 0.5, -0.15],
            [0.2, 0.5, 0.15],
            [0.7, 0.5, -0.15],
            [0.7, 0.5, 0.15],
            [-0.4, -0.1, 0.0],
        ]
        .iter()
        .map(|p| Vector3::new(p[0], p[1], p[2]))
        .collect()
    }

    #[test]
    fn identity_alignment() {
        let x = oracle_points();
        let s = procrustes_align(&x, &x).unwrap();
        assert!((s.scale - 1.0).abs() < 1e-12);
        assert!((s.rotation - Matrix3::identity()).amax() < 1e-12);
        assert!(s.translation.amax() < 1e-12);
        assert_eq!(pa_mpjpe(&x, &x).unwrap() < 1e-12, true);
    }

    #[test]
    fn recovers_exact_similarity() {
        let x = oracle_points();
        let r0 = rodrigues(&Vector3::new(0.4, -1.1, 2.0)).unwrap();
        let t0 = Vector3::new(1.0, -2.0, 0.5);
        let y: Vec<_> = x.iter().map(|p| 2.0 * r0 * p + t0).collect();
        let s = procrustes_align(&x, &y).unwrap();
        assert!((s.scale - 2.0).abs() < 1e-10);
        assert!((s.rotation - r0).amax() < 1e-10);
        assert!((s.translation - t0).amax() < 1e-10);
        let res: f64 = s
            .apply_all(&x)
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b).norm())
            .sum();
        assert!(res < 1e-10);
    }

    #[test]
    fn reflection_is_excluded() {
        let x = oracle_points();
        let y: Vec<_> = x.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let s = procrustes_align(&x, &y).unwrap();
        assert!((s.rotation.determinant() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn degenerate_inputs() {
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            procrustes_align(&line, &line),
            Err(Error::Degenerate(_))
        ));
        let two = &oracle_points()[..2];
        assert!(procrustes_align(two, two).is_err());
    }

    #[test]
    fn single_joint_offset_matches_oracle() {
        let gt = oracle_points();
        let mut pred = gt.clone();
        pred[3] += Vector3::repeat(0.1);
        // Frozen from a scipy minimizer over (log s, rotvec, t). The minimizer
        // pins the residual far more tightly than the argmin, hence the looser
        // tolerance on the mean distance.
        let v = pa_mpjpe(&pred, &gt).unwrap();
        assert!((v - 0.03205780392419526).abs() < 1e-8, "{v}");
        let s = procrustes_align(&pred, &gt).unwrap();
        let ssr: f64 = s
            .apply_all(&pred)
            .iter()
            .zip(&gt)
            .map(|(a, b)| (a - b).norm_squared())
            .sum();
        assert!((ssr - 0.022224595284913735).abs() < 1e-13, "{ssr}");
    }

    fn grid(n: usize) -> Vec<Vector2<f64>> {
        (0..n)
            .map(|i| Vector2::new(10.0 * i as f64, 3.0 * i as f64))
            .collect()
    }

    #[test]
    fn pck_cases() {
        let gt = grid(4);
        let vis = [true; 4];
        assert_eq!(
            pck(&gt, &gt, &vis, &PckSpec::fraction(0.1)).unwrap(),
            Some(1.0)
        );

        // bbox max side 30, fraction 0.1 -> threshold 3 px.
        let mut pred = gt.clone();
        pred[0].x += 1.0;
        pred[1].y -= 2.0;
        pred[2].x += 5.0;
        pred[3].y += 4.0;
        assert_eq!(
            pck(&pred, &gt, &vis, &PckSpec::fraction(0.1)).unwrap(),
            Some(0.5)
        );
    }

    #[test]
    fn pck_hth_boundary() {
        let mut gt = vec![Vector2::new(100.0, 100.0); 9];
        gt[KP_TAIL_ROOT] = Vector2::new(200.0, 100.0);
        let vis = vec![true; 9];
        let shift =
            |d: f64| -> Vec<Vector2<f64>> { gt.iter().map(|p| p + Vector2::new(0.0, d)).collect() };
        assert_eq!(
            pck(&shift(49.0), &gt, &vis, &PckSpec::hth()).unwrap(),
            Some(1.0)
        );
        assert_eq!(
            pck(&shift(51.0), &gt, &vis, &PckSpec::hth()).unwrap(),
            Some(0.0)
        );
        let mut hidden = vis.clone();
        hidden[KP_NOSE] = false;
        assert_eq!(pck(&gt, &gt, &hidden, &PckSpec::hth()).unwrap(), None);
        assert!(matches!(
            pck(&gt, &gt, &[false; 9], &PckSpec::hth()),
            Err(Error::EmptyObservation)
        ));
    }

    #[test]
    fn auc_cases() {
        let gt = vec![Vector2::new(0.0, 0.0)];
        assert_eq!(auc(&gt, &gt, &[true], 10.0).unwrap(), 1.0);
        let pred = vec![Vector2::new(5.0, 0.0)];
        let v = auc(&pred, &gt, &[true], 10.0).unwrap();
        assert!((v - 0.5).abs() <= 0.01, "{v}");
        let far = vec![Vector2::new(11.0, 0.0)];
        assert_eq!(auc(&far, &gt, &[true], 10.0).unwrap(), 0.0);
        assert!(auc(&gt, &gt, &[true], 0.0).is_err());
    }

    #[test]
    fn report_averages_and_skips() {
        let a = InstanceMetrics {
            pa_mpjpe: 1.0,
            pa_mpvpe: Some(2.0),
            pck_hth: Some(1.0),
            pck_010: 1.0,
            pck_015: 1.0,
            auc: 0.5,
        };
        let b = InstanceMetrics {
            pa_mpjpe: 3.0,
            pa_mpvpe: None,
            pck_hth: None,
            pck_010: 0.0,
            pck_015: 0.5,
            auc: 0.25,
        };
        let r = aggregate_metrics(&[a, b]).unwrap();
        assert_eq!(r.pa_mpjpe, 2.0);
        assert_eq!(r.pa_mpvpe, Some(2.0));
        assert_eq!(r.pck_hth, Some(1.0));
        assert_eq!(r.n_hth_skipped, 1);
        assert_eq!(r.auc, 0.375);
        let mut left = MetricsAccumulator::default();
        left.push(&a);
        let mut right = MetricsAccumulator::default();
        right.push(&b);
        assert_eq!(left.merge(&right).finish().unwrap(), r);
        assert!(aggregate_metrics(&[]).is_err());
    }

    proptest! {
        #[test]
        fn pck_is_monotone_in_threshold(
            errs in prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0, any::<bool>()), 1..30),
            t1 in 0.0f64..30.0,
            dt in 0.0f64..30.0,
        ) {
            let gt: Vec<_> = (0..errs.len()).map(|i| Vector2::new(i as f64, 0.0)).collect();
            let pred: Vec<_> = gt.iter().zip(&errs).map(|(g, e)| g + Vector2::new(e.0, e.1)).collect();
            let mut vis: Vec<bool> = errs.iter().map(|e| e.2).collect();
            vis[0] = true;
            prop_assert!(pck_at(&pred, &gt, &vis, t1) <= pck_at(&pred, &gt, &vis, t1 + dt));
        }

        #[test]
        fn pa_mpjpe_absorbs_similarities(
            r in prop::array::uniform3(-3.0f64..3.0),
            t in prop::array::uniform3(-5.0f64..5.0),
            s in 0.2f64..5.0,
        ) {
            let gt = oracle_points();
            let mut pred = gt.clone();
            pred[3] += Vector3::repeat(0.1);
            pred[7] -= Vector3::new(0.05, 0.0, 0.02);
            let base = pa_mpjpe(&pred, &gt).unwrap();
            let rot = rodrigues(&Vector3::from(r)).unwrap();
            let moved: Vec<_> = pred.iter().map(|p| s * rot * p + Vector3::from(t)).collect();
            prop_assert!((pa_mpjpe(&moved, &gt).unwrap() - base).abs() < 1e-9);
        }
    }
}
