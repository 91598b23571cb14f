//! Evaluation metrics and representation export.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::data::EncodedSample;
use crate::error::{Error, Result};
use crate::model::{client_forward_batch, ClientNetwork};
use crate::nn::softmax;

/// Classification quality on one test set. Confusion rows are true classes,
/// columns predictions; `accuracy = trace / total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
    pub per_class_recall: Vec<f64>,
    /// Mean per-sample cross-entropy; absent when reconstructed from the
    /// wire protocol, which does not carry it.
    pub mean_loss: Option<f64>,
}

impl Metrics {
    /// Rebuilds derived fields from a confusion matrix (wire path).
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let classes = confusion.len();
        if confusion.iter().any(|row| row.len() != classes) {
            return Err(Error::shape("confusion matrix must be square".into()));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::invalid("confusion matrix is empty"));
        }
        let trace: u64 = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class_recall = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: u64 = row.iter().sum();
                if n == 0 { 0.0 } else { row[c] as f64 / n as f64 }
            })
            .collect();
        Ok(Metrics {
            accuracy: trace as f64 / total as f64,
            confusion,
            per_class_recall,
            mean_loss: None,
        })
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

/// Argmax with ties resolved to the lowest class index.
pub fn argmax_class(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Evaluates a client network on a test set.
pub fn evaluate(net: &ClientNetwork, test: &[EncodedSample]) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let classes = net.classes();
    let traces = client_forward_batch(net, test)?;
    let mut confusion = vec![vec![0u64; classes]; classes];
    let mut loss_sum = 0.0;
    for (r, sample) in test.iter().enumerate() {
        if sample.label >= classes {
            return Err(Error::invalid(format!(
                "label {} out of range for {classes} classes",
                sample.label
            )));
        }
        let probs = softmax(traces.logits.row(r));
        let pred = argmax_class(&probs);
        confusion[sample.label][pred] += 1;
        loss_sum += -(probs[sample.label].max(1e-12)).ln();
    }
    let mut m = Metrics::from_confusion(confusion)?;
    m.mean_loss = Some(loss_sum / test.len() as f64);
    Ok(m)
}

/// Writes per-sample representations as CSV: the label, each sub-part's
/// output, their concatenation, and the head's pre-softmax outputs. Only
/// split networks (those with a local part) expose all four groups.
pub fn export_representations(
    net: &ClientNetwork,
    dataset: &[EncodedSample],
    path: &Path,
) -> Result<()> {
    if net.local.is_none() {
        return Err(Error::invalid(
            "representation export needs a split network with a local part",
        ));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let traces = client_forward_batch(net, dataset)?;
    let local_trace = traces.local.as_ref().expect("split network has a local trace");
    let rep = net.representation_width();
    let classes = net.classes();

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = vec!["label".to_string()];
    for prefix in ["global", "local"] {
        header.extend((0..rep).map(|i| format!("{prefix}_{i}")));
    }
    header.extend((0..2 * rep).map(|i| format!("combined_{i}")));
    header.extend((0..classes).map(|i| format!("logit_{i}")));
    writeln!(file, "{}", header.join(","))?;

    let g_out = traces.global.post.last().expect("nonempty network");
    let l_out = local_trace.post.last().expect("nonempty network");
    for (r, sample) in dataset.iter().enumerate() {
        let mut cells = vec![sample.label.to_string()];
        let g = g_out.row(r);
        let l = l_out.row(r);
        cells.extend(g.iter().map(|v| format!("{v}")));
        cells.extend(l.iter().map(|v| format!("{v}")));
        cells.extend(g.iter().chain(l).map(|v| format!("{v}")));
        cells.extend(traces.logits.row(r).iter().map(|v| format!("{v}")));
        writeln!(file, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchConfig, HyperParams, Wiring};

    fn tiny_net(seed: u64) -> ClientNetwork {
        let arch = ArchConfig { subpart_layers: vec![4, 3], head_layers: vec![6], classes: 5 };
        ClientNetwork::new(Wiring::SplitPrivate, 3, 4, &arch, &HyperParams::default(), seed)
            .unwrap()
    }

    fn samples(n: usize) -> Vec<EncodedSample> {
        (0..n)
            .map(|i| EncodedSample {
                f_star: vec![0.1 * i as f64 % 1.0, 0.5, 0.9],
                f_prime: vec![0.2, 0.4, 0.6, 0.8],
                label: i % 5,
            })
            .collect()
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_class(&[0.2, 0.2, 0.2]), 0);
        assert_eq!(argmax_class(&[0.1, 0.5, 0.5]), 1);
    }

    #[test]
    fn evaluate_satisfies_confusion_identities() {
        let net = tiny_net(3);
        let test = samples(25);
        let m = evaluate(&net, &test).unwrap();
        assert_eq!(m.total(), 25);
        let trace: u64 = (0..5).map(|c| m.confusion[c][c]).sum();
        assert_eq!(m.accuracy, trace as f64 / 25.0);
        for (c, row) in m.confusion.iter().enumerate() {
            let n: u64 = row.iter().sum();
            assert_eq!(n, test.iter().filter(|s| s.label == c).count() as u64);
        }
    }

    #[test]
    fn constant_predictor_on_balanced_set_scores_chance() {
        let mut net = tiny_net(4);
        for part in [&mut net.global, net.local.as_mut().unwrap(), &mut net.head] {
            for layer in &mut part.params.layers {
                layer.weights.iter_mut().for_each(|w| *w = 0.0);
                layer.biases.iter_mut().for_each(|b| *b = 0.0);
            }
        }
        net.head.params.layers.last_mut().unwrap().biases[0] = 10.0; // always class 0
        let m = evaluate(&net, &samples(25)).unwrap();
        assert!((m.accuracy - 0.2).abs() < 1e-12);
        assert_eq!(m.per_class_recall[0], 1.0);
        assert_eq!(m.per_class_recall[1], 0.0);
    }

    #[test]
    fn evaluate_rejects_empty_set() {
        assert!(evaluate(&tiny_net(5), &[]).is_err());
    }

    #[test]
    fn export_has_expected_shape() {
        let net = tiny_net(6);
        let data = samples(7);
        let dir = std::env::temp_dir().join(format!("fedlop-metrics-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("reps.csv");
        export_representations(&net, &data, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 8); // header + 7 rows
        let cols = lines[0].split(',').count();
        // label + 3 + 3 + 6 + 5
        assert_eq!(cols, 1 + 3 + 3 + 6 + 5);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn export_zero_network_writes_zero_representations() {
        let mut net = tiny_net(7);
        for part in [&mut net.global, net.local.as_mut().unwrap(), &mut net.head] {
            for layer in &mut part.params.layers {
                layer.weights.iter_mut().for_each(|w| *w = 0.0);
                layer.biases.iter_mut().for_each(|b| *b = 0.0);
            }
        }
        let dir = std::env::temp_dir().join(format!("fedlop-metrics0-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("reps.csv");
        export_representations(&net, &samples(2), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        for line in text.lines().skip(1) {
            for cell in line.split(',').skip(1) {
                assert_eq!(cell.parse::<f64>().unwrap(), 0.0);
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
