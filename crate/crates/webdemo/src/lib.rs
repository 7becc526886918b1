//! Browser demo bindings. Three interactive operations, each returning plain
//! data so the page's JavaScript can render it: sentence mining against the
//! bundled lexicon, per-label loss curves, and synthetic lesion generation.

use std::sync::OnceLock;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use lesionlab::dataset::{synth_generate, SynthConfig};
use lesionlab::loss::{bootstrap_target, ClassWeights, LossConfig, LossMode};
use lesionlab::ontology::Ontology;
use lesionlab::textmine::{lemmatize_tokens, match_labels, tokenize, Sentence};

const LEXICON: &str = include_str!("../../core/fixtures/golden_lexicon.tsv");

fn ontology() -> &'static Ontology {
    static CELL: OnceLock<Ontology> = OnceLock::new();
    CELL.get_or_init(|| Ontology::parse(LEXICON).expect("bundled lexicon is valid"))
}

#[derive(Serialize)]
struct TokenView {
    surface: String,
    lemma: String,
}

#[derive(Serialize)]
struct MatchView {
    name: String,
    token_start: usize,
    token_end: usize,
}

#[derive(Serialize)]
struct LabelView {
    name: String,
    category: String,
    /// Whether the label was matched in the text (false = added by
    /// parent expansion).
    direct: bool,
}

#[derive(Serialize)]
struct MineView {
    tokens: Vec<TokenView>,
    matches: Vec<MatchView>,
    expanded: Vec<LabelView>,
}

/// Mines a sentence against the bundled lexicon. Returns JSON with the
/// token/lemma sequence, the matched terms, and the expanded label set.
#[wasm_bindgen]
pub fn mine_sentence_demo(text: &str) -> String {
    let o = ontology();
    let sentence = Sentence::new(text);
    let tokens = lemmatize_tokens(tokenize(&sentence.text));
    let matched = match_labels(&tokens, o);
    let expanded = o.expand(matched.label_ids.iter().copied());

    let view = MineView {
        tokens: tokens
            .iter()
            .map(|t| TokenView {
                surface: t.surface.clone(),
                lemma: t.lemma.clone(),
            })
            .collect(),
        matches: matched
            .matches
            .iter()
            .map(|(id, range)| MatchView {
                name: o.label(*id).name.clone(),
                token_start: range.start,
                token_end: range.end,
            })
            .collect(),
        expanded: expanded
            .iter()
            .map(|&id| LabelView {
                name: o.label(id).name.clone(),
                category: o.label(id).category.to_string(),
                direct: matched.label_ids.contains(&id),
            })
            .collect(),
    };
    serde_json::to_string(&view).expect("serializable view")
}

#[derive(Serialize)]
struct LossCurves {
    s: Vec<f64>,
    plain: Vec<f64>,
    weighted: Vec<f64>,
    bootstrap: Vec<f64>,
    target: Vec<f64>,
}

/// Per-label loss as a function of the predicted score, for the plain,
/// weighted, and bootstrapped objectives. `y` is the (possibly wrong) given
/// label. Returns JSON arrays of `n` curve points.
#[wasm_bindgen]
pub fn loss_curves_demo(y: u8, beta: f64, w_pos: f64, w_neg: f64, n: u32) -> String {
    let n = n.clamp(8, 4096) as usize;
    let beta = beta.clamp(0.0, 1.0);
    let target_label = vec![y != 0];
    let weights = ClassWeights {
        w_pos: vec![w_pos.max(1e-3)],
        w_neg: vec![w_neg.max(1e-3)],
    };
    let eps = 1e-7;

    let mut curves = LossCurves {
        s: Vec::with_capacity(n),
        plain: Vec::with_capacity(n),
        weighted: Vec::with_capacity(n),
        bootstrap: Vec::with_capacity(n),
        target: Vec::with_capacity(n),
    };
    for i in 0..n {
        let s = (i as f64 + 0.5) / n as f64;
        let at = |mode: LossMode| {
            let cfg = LossConfig { mode, beta, eps };
            lesionlab::loss::multilabel_loss(&target_label, &[s], &weights, &cfg)
                .expect("matched lengths")
        };
        curves.s.push(s);
        curves.plain.push(at(LossMode::Plain));
        curves.weighted.push(at(LossMode::Weighted));
        curves.bootstrap.push(at(LossMode::WeightedBootstrap));
        curves.target.push(bootstrap_target(y as f64, s, beta));
    }
    serde_json::to_string(&curves).expect("serializable curves")
}

fn demo_synth_config(seed: u32, missing_rate: f64, spurious_rate: f64) -> SynthConfig {
    SynthConfig {
        n_labels: 40,
        n_train: 1,
        n_test: 1,
        missing_rate: missing_rate.clamp(0.0, 1.0),
        spurious_rate: spurious_rate.clamp(0.0, 1.0),
        rng_seed: seed as u64,
        patch_px: 64,
    }
}

#[derive(Serialize)]
struct SynthView {
    sentence: String,
    truth: Vec<String>,
    mined: Vec<String>,
    /// True labels the sentence lost to missing-label noise.
    missing: Vec<String>,
    /// Mined labels that are not actually true (spurious mentions).
    spurious: Vec<String>,
    bbox: [f64; 4],
    patch_px: usize,
}

/// Generates one synthetic lesion: its report sentence, ground-truth and
/// mined label sets, and the lesion box. Returns JSON.
#[wasm_bindgen]
pub fn synth_example_demo(seed: u32, missing_rate: f64, spurious_rate: f64) -> String {
    let cfg = demo_synth_config(seed, missing_rate, spurious_rate);
    let out = synth_generate(&cfg).expect("valid demo config");
    let o = &out.ontology;
    let record = &out.records[0];

    let truth: Vec<usize> = record.truth_labels.clone().unwrap_or_default();
    let mined = lesionlab::textmine::mine_label_set(&Sentence::new(record.sentence.clone()), o);

    let names = |ids: &[usize]| -> Vec<String> {
        ids.iter().map(|&i| o.label(i).name.clone()).collect()
    };
    let mined_ids: Vec<usize> = mined.iter().copied().collect();
    let missing: Vec<usize> = truth.iter().copied().filter(|i| !mined.contains(i)).collect();
    let spurious: Vec<usize> = mined_ids.iter().copied().filter(|i| !truth.contains(i)).collect();

    let view = SynthView {
        sentence: record.sentence.clone(),
        truth: names(&truth),
        mined: names(&mined_ids),
        missing: names(&missing),
        spurious: names(&spurious),
        bbox: record.bbox_mm,
        patch_px: cfg.patch_px,
    };
    serde_json::to_string(&view).expect("serializable view")
}

/// RGBA pixels of the same synthetic lesion's patch (the three slice
/// channels mapped to red, green, blue). Length is `4 * patch_px^2`.
#[wasm_bindgen]
pub fn synth_patch_demo(seed: u32, missing_rate: f64, spurious_rate: f64) -> Vec<u8> {
    let cfg = demo_synth_config(seed, missing_rate, spurious_rate);
    let out = synth_generate(&cfg).expect("valid demo config");
    let patch = &out.patches[0];
    let p = cfg.patch_px;

    let mut rgba = Vec::with_capacity(4 * p * p);
    for y in 0..p {
        for x in 0..p {
            for ch in 0..3 {
                rgba.push((patch[[ch, y, x]].clamp(0.0, 1.0) * 255.0) as u8);
            }
            rgba.push(255);
        }
    }
    rgba
}
