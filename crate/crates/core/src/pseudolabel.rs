//! Pseudo-label refinement: source class centers in logit space, and
//! selection of target samples whose confident prediction agrees with the
//! nearest center.

use crate::error::{Error, Result};
use crate::network::{cross_entropy, softmax, Mode, NetworkGrads, NetworkParams};
use crate::numerics::{argmax, argmin, Logits, Matrix};

/// One center per class, each a row in the network output space.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters {
    pub centers: Matrix,
    pub counts: Vec<usize>,
}

impl ClassCenters {
    pub fn classes(&self) -> usize {
        self.centers.rows()
    }
}

/// Mean logits row of every source class.
pub fn compute_class_centers(source_logits: &Logits, labels: &[usize], classes: usize) -> Result<ClassCenters> {
    if labels.len() != source_logits.rows() {
        return Err(Error::config(format!(
            "{} labels for {} logit rows",
            labels.len(),
            source_logits.rows()
        )));
    }
    let width = source_logits.cols();
    let mut sums = Matrix::zeros(classes, width);
    let mut counts = vec![0usize; classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::data(format!(
                "label {y} at row {r} is out of range for {classes} classes"
            )));
        }
        counts[y] += 1;
        for (s, &v) in sums.row_mut(y).iter_mut().zip(source_logits.row(r)) {
            *s += v;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::data(format!("class {c} has no source samples; its center is undefined")));
    }
    for (c, &n) in counts.iter().enumerate() {
        sums.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(ClassCenters {
        centers: sums,
        counts,
    })
}

/// L1 distance from `row` to every center and the index of the closest one
/// (lowest index on ties).
pub fn nearest_center(row: &[f64], centers: &ClassCenters) -> (usize, Vec<f64>) {
    let distances: Vec<f64> = centers
        .centers
        .iter_rows()
        .map(|c| c.iter().zip(row).map(|(a, b)| (a - b).abs()).sum())
        .collect();
    (argmin(&distances), distances)
}

/// Target samples accepted in one refinement round, with the evidence for
/// each acceptance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabelSet {
    /// Sorted, unique row indices into the target set.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub max_prob: Vec<f64>,
    pub nearest_center: Vec<usize>,
    pub threshold: f64,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Fraction of pseudo labels equal to the ground truth, if any were
    /// selected.
    pub fn precision(&self, truth: &[usize]) -> Option<f64> {
        if self.is_empty() {
            return None;
        }
        let hits = self
            .indices
            .iter()
            .zip(&self.labels)
            .filter(|(&i, &y)| truth[i] == y)
            .count();
        Some(hits as f64 / self.len() as f64)
    }

    /// The subset at the given positions (not target indices).
    pub fn subset(&self, positions: &[usize]) -> PseudoLabelSet {
        let mut picked: Vec<usize> = positions.to_vec();
        picked.sort_unstable();
        picked.dedup();
        PseudoLabelSet {
            indices: picked.iter().map(|&p| self.indices[p]).collect(),
            labels: picked.iter().map(|&p| self.labels[p]).collect(),
            max_prob: picked.iter().map(|&p| self.max_prob[p]).collect(),
            nearest_center: picked.iter().map(|&p| self.nearest_center[p]).collect(),
            threshold: self.threshold,
        }
    }
}

/// Accepts sample `j` iff its largest softmax probability exceeds
/// `threshold` and its nearest class center is the predicted class.
pub fn select_pseudo_labels(target_logits: &Logits, centers: &ClassCenters, threshold: f64) -> Result<PseudoLabelSet> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    if target_logits.cols() != centers.centers.cols() {
        return Err(Error::config(format!(
            "logits have width {}, centers have width {}",
            target_logits.cols(),
            centers.centers.cols()
        )));
    }
    let probs = softmax(target_logits);
    let mut set = PseudoLabelSet {
        threshold,
        ..PseudoLabelSet::default()
    };
    for j in 0..target_logits.rows() {
        let p = probs.row(j);
        let predicted = argmax(p);
        let max_prob = p[predicted];
        if max_prob <= threshold {
            continue;
        }
        let (closest, _) = nearest_center(target_logits.row(j), centers);
        if closest == predicted {
            set.indices.push(j);
            set.labels.push(predicted);
            set.max_prob.push(max_prob);
            set.nearest_center.push(closest);
        }
    }
    Ok(set)
}

/// Decreasing confidence thresholds, one per refinement round.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementSchedule {
    thresholds: Vec<f64>,
}

impl RefinementSchedule {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::config("refinement schedule needs at least one threshold"));
        }
        if let Some(p) = thresholds.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::config(format!("threshold {p} is outside (0, 1)")));
        }
        if thresholds.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::config(format!(
                "thresholds must be strictly decreasing, got {thresholds:?}"
            )));
        }
        Ok(Self { thresholds })
    }

    pub fn rounds(&self) -> usize {
        self.thresholds.len()
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn threshold(&self, round: usize) -> f64 {
        self.thresholds[round]
    }
}

impl Default for RefinementSchedule {
    fn default() -> Self {
        Self {
            thresholds: vec![0.9, 0.6, 0.3],
        }
    }
}

#[derive(Debug, Clone)]
pub struct TargetLoss {
    pub loss: f64,
    pub grads: NetworkGrads,
}

/// Mean cross-entropy of the network on the selected target samples against
/// their pseudo labels, evaluated batch by batch in selection order.
///
/// Batches use train-mode forwards (and so update BatchNorm running
/// statistics). A trailing batch of one sample joins the previous batch; a
/// selection of exactly one sample is evaluated with frozen statistics.
/// Returns `None` for an empty selection, meaning the caller skips the term.
pub fn target_loss(
    params: &mut NetworkParams,
    selected: &PseudoLabelSet,
    target_features: &Matrix,
    batch: usize,
) -> Result<Option<TargetLoss>> {
    if selected.is_empty() {
        return Ok(None);
    }
    if batch == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if let Some(&i) = selected.indices.iter().find(|&&i| i >= target_features.rows()) {
        return Err(Error::data(format!(
            "pseudo-label index {i} exceeds target set of {} rows",
            target_features.rows()
        )));
    }
    let n = selected.len();
    if n == 1 {
        let x = target_features.select_rows(&selected.indices);
        let (logits, cache) = params.forward_eval(&x)?;
        let (loss, dlogits) = cross_entropy(&logits, &selected.labels)?;
        let grads = params.backward_frozen(&cache, &dlogits, None)?;
        return Ok(Some(TargetLoss { loss, grads }));
    }

    let mut bounds: Vec<(usize, usize)> = (0..n).step_by(batch).map(|s| (s, (s + batch).min(n))).collect();
    if bounds.len() > 1 && bounds[bounds.len() - 1].1 - bounds[bounds.len() - 1].0 == 1 {
        let (_, end) = bounds.pop().unwrap();
        bounds.last_mut().unwrap().1 = end;
    }

    let mut total_loss = 0.0;
    let mut total: Option<NetworkGrads> = None;
    for (start, end) in bounds {
        let weight = (end - start) as f64 / n as f64;
        let x = target_features.select_rows(&selected.indices[start..end]);
        let (logits, cache) = params.forward(&x, Mode::Train)?;
        let (loss, dlogits) = cross_entropy(&logits, &selected.labels[start..end])?;
        let grads = params.backward(&cache, &dlogits)?;
        total_loss += weight * loss;
        match total.as_mut() {
            Some(acc) => acc.accumulate(&grads, weight),
            None => {
                let mut first = grads;
                for g in first
                    .weights
                    .iter_mut()
                    .chain(first.biases.iter_mut())
                    .chain(first.gammas.iter_mut())
                    .chain(first.betas.iter_mut())
                {
                    *g = g.scale(weight);
                }
                total = Some(first);
            }
        }
    }
    Ok(total.map(|grads| TargetLoss {
        loss: total_loss,
        grads,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_params_with_widths;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn centers(rows: &[[f64; 2]]) -> ClassCenters {
        ClassCenters {
            centers: Matrix::from_rows(rows).unwrap(),
            counts: vec![1; rows.len()],
        }
    }

    #[test]
    fn centers_are_class_means() {
        let logits = Matrix::from_rows(&[[1.0, 0.0], [5.0, 5.0], [3.0, 0.0]]).unwrap();
        let c = compute_class_centers(&logits, &[0, 1, 0], 2).unwrap();
        assert_eq!(c.centers.row(0), &[2.0, 0.0]);
        assert_eq!(c.centers.row(1), &[5.0, 5.0]);
        assert_eq!(c.counts, vec![2, 1]);

        let err = compute_class_centers(&logits, &[0, 0, 0], 2).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("class 1")));
    }

    #[test]
    fn singleton_classes_reproduce_their_rows() {
        let logits = Matrix::from_rows(&[[0.2, -1.0, 3.0], [4.0, 0.5, 0.0], [1.0, 1.0, 1.0]]).unwrap();
        let c = compute_class_centers(&logits, &[2, 0, 1], 3).unwrap();
        assert_eq!(c.centers.row(0), logits.row(1));
        assert_eq!(c.centers.row(1), logits.row(2));
        assert_eq!(c.centers.row(2), logits.row(0));
    }

    #[test]
    fn centers_match_grouped_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let logits = Matrix::from_fn(40, 3, |_, _| rng.gen_range(-4.0..4.0));
        let labels: Vec<usize> = (0..40).map(|i| (i * 7 + 3) % 3).collect();
        let c = compute_class_centers(&logits, &labels, 3).unwrap();
        for class in 0..3 {
            let members: Vec<usize> = (0..40).filter(|&i| labels[i] == class).collect();
            for col in 0..3 {
                let mean = members.iter().map(|&i| logits.get(i, col)).sum::<f64>() / members.len() as f64;
                assert!((c.centers.get(class, col) - mean).abs() < 1e-12);
            }
        }
        // permutation invariance
        let perm: Vec<usize> = (0..40).rev().collect();
        let permuted_labels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let cp = compute_class_centers(&logits.select_rows(&perm), &permuted_labels, 3).unwrap();
        for (a, b) in c.centers.as_slice().iter().zip(cp.centers.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_center_examples() {
        let c = centers(&[[2.0, 0.0], [0.0, 2.0]]);
        let (idx, d) = nearest_center(&[3.0, 0.0], &c);
        assert_eq!((idx, d), (0, vec![1.0, 5.0]));
        assert_eq!(nearest_center(&[0.0, 2.0], &c).0, 1);
        assert_eq!(nearest_center(&[1.0, 1.0], &c).0, 0);
    }

    #[test]
    fn selection_requires_both_criteria() {
        let logits = Matrix::from_rows(&[[3.0, 0.0]]).unwrap();
        let set = select_pseudo_labels(&logits, &centers(&[[2.0, 0.0], [0.0, 2.0]]), 0.9).unwrap();
        assert_eq!(set.indices, vec![0]);
        assert_eq!(set.labels, vec![0]);
        assert!((set.max_prob[0] - 0.9526).abs() < 1e-4);

        let swapped = select_pseudo_labels(&logits, &centers(&[[0.0, 2.0], [2.0, 0.0]]), 0.9).unwrap();
        assert!(swapped.is_empty());

        let flat = Matrix::from_rows(&[[0.01, 0.0], [0.0, 0.02]]).unwrap();
        assert!(select_pseudo_labels(&flat, &centers(&[[1.0, 0.0], [0.0, 1.0]]), 0.999)
            .unwrap()
            .is_empty());
        assert!(select_pseudo_labels(&flat, &centers(&[[1.0, 0.0], [0.0, 1.0]]), 1.0).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert_eq!(RefinementSchedule::default().thresholds(), &[0.9, 0.6, 0.3]);
        assert!(RefinementSchedule::new(vec![0.6, 0.6]).is_err());
        assert!(RefinementSchedule::new(vec![0.3, 0.6]).is_err());
        assert!(RefinementSchedule::new(vec![1.2]).is_err());
        assert!(RefinementSchedule::new(vec![]).is_err());
    }

    fn tiny_problem() -> (NetworkParams, Matrix) {
        let p = init_params_with_widths(3, [6, 5], 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (p, Matrix::from_fn(7, 3, |_, _| rng.gen_range(-1.0..1.0)))
    }

    fn selection(indices: Vec<usize>, labels: Vec<usize>) -> PseudoLabelSet {
        let n = indices.len();
        PseudoLabelSet {
            indices,
            nearest_center: labels.clone(),
            labels,
            max_prob: vec![1.0; n],
            threshold: 0.5,
        }
    }

    #[test]
    fn empty_selection_is_skipped() {
        let (mut p, x) = tiny_problem();
        assert!(target_loss(&mut p, &PseudoLabelSet::default(), &x, 4).unwrap().is_none());
    }

    #[test]
    fn single_sample_reduces_to_cross_entropy() {
        let (mut p, x) = tiny_problem();
        let before = p.clone();
        let out = target_loss(&mut p, &selection(vec![3], vec![1]), &x, 4).unwrap().unwrap();
        let logits = before.predict(&x.select_rows(&[3])).unwrap();
        let (ce, _) = cross_entropy(&logits, &[1]).unwrap();
        assert!((out.loss - ce).abs() < 1e-15);
        assert_eq!(p, before);
    }

    #[test]
    fn trailing_single_sample_joins_previous_batch() {
        let (mut p, x) = tiny_problem();
        let sel = selection(vec![0, 1, 2, 4, 6], vec![0, 1, 0, 1, 1]);
        let mut q = p.clone();
        let out = target_loss(&mut p, &sel, &x, 2).unwrap().unwrap();
        // batches {0,1} and {2,4,6}
        let (l1, _) = q.forward(&x.select_rows(&[0, 1]), Mode::Train).unwrap();
        let (l2, _) = q.forward(&x.select_rows(&[2, 4, 6]), Mode::Train).unwrap();
        let e1 = cross_entropy(&l1, &[0, 1]).unwrap().0;
        let e2 = cross_entropy(&l2, &[0, 1, 1]).unwrap().0;
        assert!((out.loss - (0.4 * e1 + 0.6 * e2)).abs() < 1e-12);
        assert_eq!(p, q);
    }
}
