use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::bodymodel::{BodyModel, BodyParams, Dataset, Posed, SampleRecord};
use crate::equinet::{EquiNet, PoseEstimate};
use crate::group60::RotationGroup;
use crate::microtensor::ParamStore;

type V3 = Vector3<f64>;

/// Errors in centimetres and segmentation accuracy in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub v2v_cm: f64,
    pub mpjpe_cm: f64,
    pub seg_accuracy_percent: f64,
}

/// Per-record metrics and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<Metrics>,
    pub mean: Metrics,
}

fn mean_distance_cm(a: &[V3], b: &[V3]) -> f64 {
    assert_eq!(a.len(), b.len(), "point sets differ in size");
    100.0 * a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len().max(1) as f64
}

/// Mean per-vertex distance in centimetres (inputs in metres).
pub fn v2v_cm(pred: &[V3], gt: &[V3]) -> f64 {
    mean_distance_cm(pred, gt)
}

/// Mean per-joint distance in centimetres (inputs in metres).
pub fn mpjpe_cm(pred: &[V3], gt: &[V3]) -> f64 {
    mean_distance_cm(pred, gt)
}

/// Share of points whose predicted label is correct, in percent.
pub fn seg_accuracy_percent(pred: &[usize], gt: &[usize]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "label sets differ in size");
    100.0 * pred.iter().zip(gt).filter(|(a, b)| a == b).count() as f64 / gt.len().max(1) as f64
}

/// Poses the body from a decoded estimate, translated so the root joint
/// lands on `root`.
pub fn predicted_body(model: &BodyModel, est: &PoseEstimate, root: &V3) -> Result<Posed, TrainError> {
    let shaped = BodyParams { beta: est.beta_hat.clone(), theta: est.local_rots.clone(), trans: V3::zeros() };
    let rest_root = model.forward_kinematics(&shaped)?.rest_joints[0];
    Ok(model.lbs(&BodyParams { trans: root - rest_root, ..shaped })?)
}

fn record_metrics(model: &BodyModel, record: &SampleRecord, est: &PoseEstimate, labels: &[usize]) -> Result<Metrics, TrainError> {
    let posed = predicted_body(model, est, &record.gt_joints[0])?;
    Ok(Metrics {
        v2v_cm: v2v_cm(&posed.vertices, &record.gt_vertices),
        mpjpe_cm: mpjpe_cm(&posed.joints, &record.gt_joints),
        seg_accuracy_percent: seg_accuracy_percent(labels, &record.labels),
    })
}

/// Runs inference on every record and scores it against ground truth.
pub fn evaluate(
    net: &EquiNet,
    group: &RotationGroup,
    model: &BodyModel,
    params: &ParamStore<f32>,
    dataset: &Dataset,
) -> Result<EvalReport, TrainError> {
    let mut samples = Vec::with_capacity(dataset.records.len());
    for record in &dataset.records {
        let inf = net.infer(group, params, &record.points)?;
        samples.push(record_metrics(model, record, &inf.pose, &inf.labels)?);
    }
    let n = samples.len().max(1) as f64;
    let mean = Metrics {
        v2v_cm: samples.iter().map(|m| m.v2v_cm).sum::<f64>() / n,
        mpjpe_cm: samples.iter().map(|m| m.mpjpe_cm).sum::<f64>() / n,
        seg_accuracy_percent: samples.iter().map(|m| m.seg_accuracy_percent).sum::<f64>() / n,
    };
    Ok(EvalReport { samples, mean })
}

/// Copy of `dataset` with each record rotated about the origin by a random
/// group element.
pub fn rotate_by_group(dataset: &Dataset, group: &RotationGroup, model: &BodyModel, seed: u64) -> Result<Dataset, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = dataset
        .records
        .iter()
        .map(|r| {
            let g = group.element(rng.random_range(0..group.len()));
            let rest_root = model.forward_kinematics(&r.gt_params)?.rest_joints[0];
            Ok(r.rotated(g, &rest_root))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(Dataset { header: dataset.header.clone(), records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::{build_toy_body, BodyConfig, PartMap};
    use crate::group60::{build_icosahedral_group, GroupWeights};
    use crate::trainer::{generate_dataset, GenSpec, PoseDistribution, RootMode};

    #[test]
    fn perfect_prediction_scores_zero() {
        let model = build_toy_body(&BodyConfig { vertices: 800, ..BodyConfig::default() }).unwrap();
        let group = build_icosahedral_group();
        let map = PartMap::for_joints(16);
        let dist = PoseDistribution::uniform(16, 0.5, RootMode::UniformSo3, 2);
        let ds = generate_dataset(&model, &map, &group, &dist, &GenSpec { count: 3, n_points: 64, noise: 0.0, seed: 1 }).unwrap();
        for r in &ds.records {
            let est = PoseEstimate {
                global_rots: r.gt_global_rots.clone(),
                weights: vec![GroupWeights::one_hot(0); 16],
                local_rots: r.gt_params.theta.clone(),
                beta_hat: r.gt_params.beta.clone(),
                translation: V3::zeros(),
            };
            let m = record_metrics(&model, r, &est, &r.labels).unwrap();
            // Ground truth is stored in f32.
            assert!(m.v2v_cm < 1e-4 && m.mpjpe_cm < 1e-4, "{m:?}");
            assert_eq!(m.seg_accuracy_percent, 100.0);
        }
    }

    #[test]
    fn constant_labels_score_their_share() {
        let gt = [0, 1, 1, 2, 1, 0, 1, 1];
        assert_eq!(seg_accuracy_percent(&[1; 8], &gt), 62.5);
    }

    #[test]
    fn distances_are_symmetric() {
        let a: Vec<V3> = (0..20).map(|i| V3::new(i as f64, (i * i) as f64 * 0.01, -0.3)).collect();
        let b: Vec<V3> = (0..20).map(|i| V3::new(0.5 * i as f64, 0.2, (i % 3) as f64)).collect();
        assert_eq!(v2v_cm(&a, &b), v2v_cm(&b, &a));
        assert_eq!(mpjpe_cm(&a, &b), mpjpe_cm(&b, &a));
        assert_eq!(v2v_cm(&a, &a), 0.0);
    }
}
