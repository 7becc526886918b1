//! Shared fixtures and helpers for the integration suites.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use lesionlab::dataset::LesionRecord;
use lesionlab::ontology::Ontology;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn golden_ontology() -> Ontology {
    Ontology::load(fixture_path("golden_lexicon.tsv")).expect("golden lexicon loads")
}

pub fn golden_records() -> Vec<LesionRecord> {
    lesionlab::dataset::read_records(fixture_path("golden_corpus.jsonl"))
        .expect("golden corpus loads")
}

/// Hand-labeled expected label-name sets, by lesion id.
pub fn golden_expected() -> BTreeMap<String, BTreeSet<String>> {
    let text =
        std::fs::read_to_string(fixture_path("golden_expected.tsv")).expect("expected file");
    let mut out = BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, names) = line.split_once('\t').unwrap_or((line, ""));
        let set: BTreeSet<String> = names
            .split('|')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        out.insert(id.to_string(), set);
    }
    out
}

/// Names of the labels set in a binary vector, sorted.
pub fn names_of(vector: &[bool], ontology: &Ontology) -> BTreeSet<String> {
    vector
        .iter()
        .enumerate()
        .filter(|(_, &on)| on)
        .map(|(i, _)| ontology.label(i).name.clone())
        .collect()
}

pub mod ablation {
    //! One synthetic ablation run: mine noisy training labels, train the
    //! same network under each loss mode from identical initialization, and
    //! evaluate per-label AUC against the complete ground-truth labels.

    use lesionlab::dataset::{
        build_corpus, label_stats_from_vectors, synth_generate, SynthConfig,
    };
    use lesionlab::eval::per_label_auc;
    use lesionlab::loss::{class_weights, LossConfig, LossMode};
    use lesionlab::model::{
        forward, train, NetworkConfig, Rect, TrainSchedule, TrainSet,
    };
    use ndarray::Array3;

    pub fn synth_config(seed: u64) -> SynthConfig {
        SynthConfig {
            n_labels: 40,
            n_train: 5000,
            n_test: 1000,
            missing_rate: 0.3,
            spurious_rate: 0.05,
            rng_seed: seed,
            patch_px: 32,
        }
    }

    pub fn network_config(n_labels: usize) -> NetworkConfig {
        NetworkConfig {
            n_stages: 3,
            channels: vec![8, 12, 16],
            in_channels: 3,
            roi_grid: (5, 5),
            fc_dim: 32,
            n_labels,
            bbox_roi_stages: vec![1, 2],
            patch_roi_stages: vec![3],
        }
    }

    pub fn schedule(seed: u64, epochs: usize) -> TrainSchedule {
        TrainSchedule {
            epochs,
            batch_size: 64,
            lr: 0.02,
            lr_after_drop: 0.002,
            lr_drop_epoch: (epochs * 4).div_ceil(5).max(2),
            momentum: 0.9,
            seed,
        }
    }

    #[derive(Debug, Clone, Copy)]
    pub struct ModeAuc {
        pub plain: f64,
        pub weighted: f64,
        pub bootstrap: f64,
    }

    /// Mean overall AUC (over labels, against ground truth) for the three
    /// loss modes on one synthetic seed. All modes share the data, the
    /// initialization, and the batch order.
    pub fn run_seed(seed: u64, epochs: usize) -> ModeAuc {
        let cfg = synth_config(seed);
        let out = synth_generate(&cfg).unwrap();
        let k = out.ontology.num_labels();

        let (train_recs, test_recs) = out.records.split_at(out.n_train);
        let (train_patches, test_patches) = out.patches.split_at(out.n_train);

        let mined = build_corpus(train_recs, &out.ontology);
        let targets: Vec<Vec<bool>> = mined.into_iter().map(|(_, v)| v).collect();
        let stats = label_stats_from_vectors(targets.iter());
        let weights = class_weights(&stats).unwrap();

        let inputs: Vec<Array3<f64>> =
            train_patches.iter().map(|p| p.mapv(f64::from)).collect();
        let bboxes: Vec<Rect> =
            train_recs.iter().map(|r| Rect::from_array(r.bbox_mm)).collect();
        let data = TrainSet {
            inputs: &inputs,
            bboxes: &bboxes,
            targets: &targets,
        };

        let test_inputs: Vec<Array3<f64>> =
            test_patches.iter().map(|p| p.mapv(f64::from)).collect();
        let test_bboxes: Vec<Rect> =
            test_recs.iter().map(|r| Rect::from_array(r.bbox_mm)).collect();
        let truth: Vec<Vec<bool>> = test_recs
            .iter()
            .map(|r| {
                let mut v = vec![false; k];
                for &id in r.truth_labels.as_ref().unwrap() {
                    v[id] = true;
                }
                v
            })
            .collect();

        let net = network_config(k);
        let sched = schedule(seed, epochs);
        let mut result = [0.0f64; 3];
        for (slot, mode) in [LossMode::Plain, LossMode::Weighted, LossMode::WeightedBootstrap]
            .into_iter()
            .enumerate()
        {
            let loss_cfg = LossConfig {
                mode,
                beta: 0.9,
                eps: 1e-7,
            };
            let (params, _) = train(&net, &data, &weights, &loss_cfg, &sched).unwrap();
            let scores: Vec<Vec<f64>> = test_inputs
                .iter()
                .zip(&test_bboxes)
                .map(|(input, bbox)| forward(&net, &params, input, bbox).unwrap().0)
                .collect();
            let (per_label, _) = per_label_auc(&scores, &truth);
            result[slot] =
                per_label.iter().map(|l| l.auc).sum::<f64>() / per_label.len() as f64;
        }
        ModeAuc {
            plain: result[0],
            weighted: result[1],
            bootstrap: result[2],
        }
    }
}
