//! Synthetic corpus generator with controlled label noise.
//!
//! Builds a layered ontology (coarse body parts -> organs -> segments, plus
//! finding types and attributes), samples lesions with complete ground-truth
//! label sets, renders report sentences that mention each true leaf label
//! with probability `1 - missing_rate`, and renders image patches whose pixel
//! statistics encode the true labels so a small network can recover them.

use ndarray::Array3;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::{DatasetError, LesionRecord, SynthConfig};
use crate::ontology::{Category, LabelId, LexiconRow, Ontology};

/// Smallest layout: 2 parts, 2 organs, 2 types, 2 attributes.
pub(super) const MIN_LABELS: usize = 8;

/// Everything the generator produces. The first `n_train` records use one
/// patient population, the rest another, so the blocks are patient-disjoint.
pub struct SynthOutput {
    pub ontology: Ontology,
    pub records: Vec<LesionRecord>,
    /// One rendered patch per record, `channels x patch_px x patch_px`.
    pub patches: Vec<Array3<f32>>,
    pub n_train: usize,
    pub stats: SynthStats,
}

/// Bookkeeping for the injected noise.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SynthStats {
    /// True leaf labels that had a chance to be mentioned.
    pub leaf_slots: usize,
    /// Leaf mentions dropped from the sentence.
    pub dropped_leaves: usize,
    /// Dropped segment mentions that were replaced by their parent organ.
    pub generalized_leaves: usize,
    /// Irrelevant labels inserted into sentences.
    pub spurious_mentions: usize,
}

/// Label layout of the generated ontology.
struct Layout {
    n_parts: usize,
    n_organs: usize,
    n_segments: usize,
    n_findings: usize,
    n_attrs: usize,
    /// part index of each organ
    organ_part: Vec<usize>,
    /// organ index of each segment
    segment_organ: Vec<usize>,
}

impl Layout {
    fn for_label_count(n: usize) -> Layout {
        assert!(n >= MIN_LABELS);
        let n_attrs = ((n as f64 * 0.15).round() as usize).clamp(2, 6);
        let n_findings = ((n as f64 * 0.10).round() as usize).clamp(2, 4);
        let n_parts = ((n as f64 * 0.075).round() as usize).clamp(2, 5);
        let rest = n - n_attrs - n_findings - n_parts;
        let n_organs = (rest / 3).max(n_parts).min(rest);
        let n_segments = rest - n_organs;

        let organ_part = (0..n_organs).map(|i| i % n_parts).collect();
        let segment_organ = (0..n_segments).map(|i| i % n_organs).collect();
        Layout {
            n_parts,
            n_organs,
            n_segments,
            n_findings,
            n_attrs,
            organ_part,
            segment_organ,
        }
    }

    fn total(&self) -> usize {
        self.n_parts + self.n_organs + self.n_segments + self.n_findings + self.n_attrs
    }

    // id blocks, in row order: parts, organs, segments, findings, attrs
    fn organ_id(&self, i: usize) -> LabelId {
        self.n_parts + i
    }
    fn segment_id(&self, i: usize) -> LabelId {
        self.n_parts + self.n_organs + i
    }
    fn finding_id(&self, i: usize) -> LabelId {
        self.n_parts + self.n_organs + self.n_segments + i
    }
    fn attr_id(&self, i: usize) -> LabelId {
        self.n_parts + self.n_organs + self.n_segments + self.n_findings + i
    }

    fn rows(&self) -> Vec<LexiconRow> {
        let mut rows = Vec::with_capacity(self.total());
        for i in 0..self.n_parts {
            rows.push(LexiconRow {
                name: format!("part{i}"),
                category: Category::BodyPart,
                synonyms: vec![],
                parents: vec![],
            });
        }
        for i in 0..self.n_organs {
            rows.push(LexiconRow {
                name: format!("organ{i}"),
                category: Category::BodyPart,
                synonyms: vec![],
                parents: vec![format!("part{}", self.organ_part[i])],
            });
        }
        for i in 0..self.n_segments {
            rows.push(LexiconRow {
                name: format!("segment{i}"),
                category: Category::BodyPart,
                synonyms: vec![],
                parents: vec![format!("organ{}", self.segment_organ[i])],
            });
        }
        for i in 0..self.n_findings {
            rows.push(LexiconRow {
                name: format!("finding{i}"),
                category: Category::FindingType,
                synonyms: vec![],
                parents: vec![],
            });
        }
        for i in 0..self.n_attrs {
            rows.push(LexiconRow {
                name: format!("attr{i}"),
                category: Category::Attribute,
                synonyms: vec![],
                parents: vec![],
            });
        }
        rows
    }
}

/// One sampled lesion before rendering.
struct Lesion {
    part: usize,
    organ: usize,
    /// global segment index, if the organ has any
    segment: Option<usize>,
    finding: usize,
    attrs: Vec<usize>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Generates a synthetic ontology, corpus, and patch set. Byte-identical
/// output for equal configs.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput, DatasetError> {
    cfg.validate()?;
    let layout = Layout::for_label_count(cfg.n_labels);
    let ontology =
        Ontology::from_rows(layout.rows()).expect("generated lexicon is valid by construction");

    let n_total = cfg.n_train + cfg.n_test;
    let mut records = Vec::with_capacity(n_total);
    let mut patches = Vec::with_capacity(n_total);
    let mut stats = SynthStats::default();

    for idx in 0..n_total {
        let mut rng = StdRng::seed_from_u64(splitmix64(cfg.rng_seed ^ splitmix64(idx as u64)));
        let lesion = sample_lesion(&layout, &mut rng);
        let truth = truth_set(&layout, &lesion, &ontology);
        let sentence = render_sentence(&layout, &lesion, &truth, &ontology, cfg, &mut rng, &mut stats);
        let (patch, bbox) = render_patch(&layout, &lesion, cfg.patch_px, &mut rng);

        let is_train = idx < cfg.n_train;
        // ~2 lesions per patient, train and test patient pools disjoint
        let patient_serial = if is_train { idx / 2 } else { (idx - cfg.n_train) / 2 };
        let patient_id = format!("{}{patient_serial:05}", if is_train { "trn" } else { "tst" });

        records.push(LesionRecord {
            lesion_id: format!("les{idx:05}"),
            patient_id,
            sentence,
            bbox_mm: bbox,
            slice_mm: 0.0,
            volume_ref: None,
            truth_labels: Some(truth),
        });
        patches.push(patch);
    }

    Ok(SynthOutput {
        ontology,
        records,
        patches,
        n_train: cfg.n_train,
        stats,
    })
}

fn sample_lesion(layout: &Layout, rng: &mut StdRng) -> Lesion {
    let part = rng.gen_range(0..layout.n_parts);
    let organs_of_part: Vec<usize> = (0..layout.n_organs)
        .filter(|&o| layout.organ_part[o] == part)
        .collect();
    let organ = organs_of_part[rng.gen_range(0..organs_of_part.len())];
    let segments_of_organ: Vec<usize> = (0..layout.n_segments)
        .filter(|&s| layout.segment_organ[s] == organ)
        .collect();
    let segment = if segments_of_organ.is_empty() {
        None
    } else {
        Some(segments_of_organ[rng.gen_range(0..segments_of_organ.len())])
    };
    let finding = rng.gen_range(0..layout.n_findings);
    let attrs: Vec<usize> = (0..layout.n_attrs).filter(|_| rng.gen_bool(0.35)).collect();
    Lesion {
        part,
        organ,
        segment,
        finding,
        attrs,
    }
}

/// Complete expanded ground-truth id set.
fn truth_set(layout: &Layout, lesion: &Lesion, ontology: &Ontology) -> Vec<LabelId> {
    let mut leaves = vec![layout.finding_id(lesion.finding)];
    leaves.push(match lesion.segment {
        Some(s) => layout.segment_id(s),
        None => layout.organ_id(lesion.organ),
    });
    leaves.extend(lesion.attrs.iter().map(|&a| layout.attr_id(a)));
    ontology.expand(leaves).into_iter().collect()
}

fn render_sentence(
    layout: &Layout,
    lesion: &Lesion,
    truth: &[LabelId],
    ontology: &Ontology,
    cfg: &SynthConfig,
    rng: &mut StdRng,
    stats: &mut SynthStats,
) -> String {
    // each true leaf label is mentioned with probability 1 - missing_rate
    let keep = |stats: &mut SynthStats, rng: &mut StdRng| {
        stats.leaf_slots += 1;
        if rng.gen_bool(cfg.missing_rate) {
            stats.dropped_leaves += 1;
            false
        } else {
            true
        }
    };

    let finding_word = if keep(stats, rng) {
        ontology.label(layout.finding_id(lesion.finding)).name.clone()
    } else {
        "lesion".to_string()
    };

    let loc_word = match lesion.segment {
        Some(s) => {
            if keep(stats, rng) {
                ontology.label(layout.segment_id(s)).name.clone()
            } else if rng.gen_bool(0.5) {
                // detail-level variation: the segment is depicted as its organ
                stats.generalized_leaves += 1;
                ontology.label(layout.organ_id(lesion.organ)).name.clone()
            } else {
                "area".to_string()
            }
        }
        None => {
            if keep(stats, rng) {
                ontology.label(layout.organ_id(lesion.organ)).name.clone()
            } else {
                "area".to_string()
            }
        }
    };

    let mut attr_words = Vec::new();
    for &a in &lesion.attrs {
        if keep(stats, rng) {
            attr_words.push(ontology.label(layout.attr_id(a)).name.clone());
        }
    }
    let attr_phrase = if attr_words.is_empty() {
        String::new()
    } else {
        format!("{} ", attr_words.join(" "))
    };

    let mut sentence = match rng.gen_range(0..4) {
        0 => format!("There is a {attr_phrase}{finding_word} in the {loc_word} (BOOKMARK)."),
        1 => format!("{attr_phrase}{finding_word} at the {loc_word} (BOOKMARK) is unchanged."),
        2 => format!("Stable {attr_phrase}{finding_word} involving the {loc_word} (BOOKMARK)."),
        _ => format!("A {attr_phrase}{finding_word} is seen within the {loc_word} (BOOKMARK)."),
    };

    if cfg.spurious_rate > 0.0 && rng.gen_bool(cfg.spurious_rate) {
        let candidates: Vec<LabelId> =
            (0..ontology.num_labels()).filter(|id| !truth.contains(id)).collect();
        if !candidates.is_empty() {
            let spurious = candidates[rng.gen_range(0..candidates.len())];
            sentence.push_str(&format!(" Incidental {} also noted.", ontology.label(spurious).name));
            stats.spurious_mentions += 1;
        }
    }

    sentence
}

/// `n` marker positions spaced around the patch border (top-left corners of
/// `m x m` squares, inset one pixel).
fn ring_slots(p: usize, m: usize, n: usize) -> Vec<(usize, usize)> {
    let lo = 1usize;
    let hi = p.saturating_sub(m + 1).max(lo + 1);
    let span = hi - lo;
    let perimeter = 4 * span;
    (0..n)
        .map(|i| {
            let d = i * perimeter / n;
            let (side, off) = (d / span, d % span);
            match side {
                0 => (lo, lo + off),
                1 => (lo + off, hi),
                2 => (hi, hi - off),
                _ => (hi - off, lo),
            }
        })
        .collect()
}

// attribute render effects, by attribute index mod 6
const ATTR_LARGE: usize = 0;
const ATTR_BRIGHT: usize = 1;
const ATTR_SPECKLED: usize = 2;
const ATTR_SOFT: usize = 3;
const ATTR_ELONGATED: usize = 4;
const ATTR_FAINT: usize = 5;

/// Renders the 3-channel patch. Pixel statistics encode the true labels:
/// background level = part, stripe frequency = organ, border-marker position
/// = segment, blob shape = finding, blob size/intensity/edge/texture =
/// attributes. The three channels are neighboring slices of a shrinking
/// blob cross-section.
fn render_patch(
    layout: &Layout,
    lesion: &Lesion,
    patch_px: usize,
    rng: &mut StdRng,
) -> (Array3<f32>, [f64; 4]) {
    let p = patch_px;
    let pf = p as f64;
    let has = |attr: usize| lesion.attrs.iter().any(|&a| a % 6 == attr);

    let part_rank = lesion.part;
    let organ_rank = (0..layout.n_organs)
        .filter(|&o| layout.organ_part[o] == lesion.part)
        .position(|o| o == lesion.organ)
        .unwrap_or(0);

    let base = 0.10 + 0.10 * part_rank as f64;
    let stripe_freq = 2.0 + 2.0 * organ_rank as f64;
    let stripe_amp = 0.06;
    let stripe_phase = rng.gen_range(0.0..std::f64::consts::TAU);

    // lesion geometry
    let mut radius = pf / 10.0;
    if has(ATTR_LARGE) {
        radius *= 1.8;
    }
    let (rx, ry) = if has(ATTR_ELONGATED) {
        (radius * 1.5, radius * 0.67)
    } else {
        (radius, radius)
    };
    let cx = pf / 2.0 + rng.gen_range(-1.0..1.0);
    let cy = pf / 2.0 + rng.gen_range(-1.0..1.0);
    let mut core = 0.62;
    if has(ATTR_BRIGHT) {
        core += 0.30;
    }
    if has(ATTR_FAINT) {
        core -= 0.22;
    }
    let edge_px = if has(ATTR_SOFT) { 2.5 } else { 0.6 };
    let shape = lesion.finding % 4;

    // speckle offsets in blob-relative units
    let speckles: Vec<(f64, f64)> = if has(ATTR_SPECKLED) {
        (0..8)
            .map(|_| {
                (
                    rng.gen_range(-0.6..0.6),
                    rng.gen_range(-0.6..0.6),
                )
            })
            .collect()
    } else {
        Vec::new()
    };

    // border marker at a position unique to this segment, so fine-location
    // features cannot be shared across labels
    let marker = lesion.segment.map(|seg| {
        let m = (p / 8).max(3);
        let slots = ring_slots(p, m, layout.n_segments.max(1));
        let (my, mx) = slots[seg];
        (my, mx, m)
    });

    let mut patch = Array3::<f32>::zeros((3, p, p));
    for ch in 0..3usize {
        let z = ch as f64 - 1.0;
        let slice_scale = (1.0 - (0.45 * z).powi(2)).max(0.0).sqrt();
        let (srx, sry) = (rx * slice_scale, ry * slice_scale);
        for y in 0..p {
            for x in 0..p {
                let mut val = base
                    + stripe_amp
                        * (std::f64::consts::TAU * stripe_freq * x as f64 / pf + stripe_phase)
                            .sin();

                if let Some((my, mx, m)) = marker {
                    if y >= my && y < my + m && x >= mx && x < mx + m {
                        // deliberately subtle: fine-location labels are the
                        // hard ones
                        val += 0.15;
                    }
                }

                let dx = (x as f64 + 0.5 - cx) / srx;
                let dy = (y as f64 + 0.5 - cy) / sry;
                let d = match shape {
                    0 => (dx * dx + dy * dy).sqrt(),
                    1 => (dx * dx + dy * dy).sqrt(), // ring; inner edge below
                    2 => dx.abs().max(dy.abs()),
                    _ => dx.abs() + dy.abs(),
                };
                let w = (edge_px / srx.min(sry)).max(1e-6);
                let mut coverage = ((1.0 - d) / w + 0.5).clamp(0.0, 1.0);
                if shape == 1 {
                    coverage *= ((d - 0.55) / w + 0.5).clamp(0.0, 1.0);
                }
                if coverage > 0.0 {
                    val = val * (1.0 - coverage) + core * coverage;
                    if coverage > 0.5 {
                        for &(sy, sx) in &speckles {
                            if (dx - sx).abs() < 0.12 && (dy - sy).abs() < 0.12 {
                                val = 1.0;
                            }
                        }
                    }
                }

                // Box-Muller pixel noise
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let noise = 0.02 * (-2.0 * u1.ln()).sqrt() * u2.cos();

                patch[[ch, y, x]] = ((val + noise).clamp(0.0, 1.0)) as f32;
            }
        }
    }

    let margin = 1.5;
    let bbox = [
        (cx - rx - margin).max(0.0),
        (cy - ry - margin).max(0.0),
        (cx + rx + margin).min(pf),
        (cy + ry + margin).min(pf),
    ];
    (patch, bbox)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_corpus;
    use crate::ontology::Ontology as Ont;
    use crate::textmine::tokenize;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_labels: 40,
            n_train: 200,
            n_test: 50,
            missing_rate: 0.0,
            spurious_rate: 0.0,
            rng_seed: 7,
            patch_px: 32,
        }
    }

    #[test]
    fn layout_hits_requested_label_count() {
        for n in [8, 12, 16, 25, 40, 80, 145] {
            assert_eq!(Layout::for_label_count(n).total(), n, "n = {n}");
        }
    }

    #[test]
    fn noise_free_mining_recovers_truth() {
        let out = synth_generate(&small_cfg()).unwrap();
        let corpus = build_corpus(&out.records, &out.ontology);
        for (record, mined) in &corpus {
            let truth = record.truth_labels.as_ref().unwrap();
            let mined_ids: Vec<usize> = Ont::to_id_set(mined).into_iter().collect();
            assert_eq!(&mined_ids, truth, "lesion {}", record.lesion_id);
        }
    }

    #[test]
    fn full_missing_rate_leaves_no_leaf_terms() {
        let cfg = SynthConfig {
            missing_rate: 1.0,
            ..small_cfg()
        };
        let out = synth_generate(&cfg).unwrap();
        for record in &out.records {
            let tokens = tokenize(&record.sentence);
            for tok in &tokens {
                let lower = tok.surface.to_lowercase();
                assert!(
                    !lower.starts_with("segment")
                        && !lower.starts_with("finding")
                        && !lower.starts_with("attr"),
                    "leaf term {lower:?} in {:?}",
                    record.sentence
                );
            }
        }
        assert_eq!(out.stats.dropped_leaves, out.stats.leaf_slots);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            missing_rate: 0.3,
            spurious_rate: 0.05,
            ..small_cfg()
        };
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.stats, b.stats);
        for (pa, pb) in a.patches.iter().zip(&b.patches) {
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn drop_rate_converges_to_missing_rate() {
        let cfg = SynthConfig {
            n_train: 5000,
            n_test: 100,
            missing_rate: 0.3,
            ..small_cfg()
        };
        let out = synth_generate(&cfg).unwrap();
        let rate = out.stats.dropped_leaves as f64 / out.stats.leaf_slots as f64;
        assert!((rate - 0.3).abs() < 0.02, "observed drop rate {rate}");

        // independent recount from the records: a dropped leaf's token is
        // absent from its sentence
        let mut slots = 0usize;
        let mut absent = 0usize;
        for record in &out.records {
            let tokens: std::collections::HashSet<String> = tokenize(&record.sentence)
                .iter()
                .map(|t| t.surface.to_lowercase())
                .collect();
            let truth = record.truth_labels.as_ref().unwrap();
            for &id in truth {
                let name = &out.ontology.label(id).name;
                let is_leaf = !truth
                    .iter()
                    .any(|&other| out.ontology.ancestors(other).contains(&id));
                if is_leaf {
                    slots += 1;
                    if !tokens.contains(name) {
                        absent += 1;
                    }
                }
            }
        }
        assert_eq!(slots, out.stats.leaf_slots);
        assert_eq!(absent, out.stats.dropped_leaves);
    }

    #[test]
    fn patches_are_normalized_and_sized() {
        let out = synth_generate(&small_cfg()).unwrap();
        for (patch, record) in out.patches.iter().zip(&out.records) {
            assert_eq!(patch.dim(), (3, 32, 32));
            assert!(patch.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let [x0, y0, x1, y1] = record.bbox_mm;
            assert!(x0 < x1 && y0 < y1);
            assert!(x1 <= 32.0 && y1 <= 32.0);
        }
    }

    #[test]
    fn train_and_test_patients_are_disjoint() {
        let out = synth_generate(&small_cfg()).unwrap();
        let (train, test) = out.records.split_at(out.n_train);
        let train_patients: std::collections::HashSet<&str> =
            train.iter().map(|r| r.patient_id.as_str()).collect();
        let test_patients: std::collections::HashSet<&str> =
            test.iter().map(|r| r.patient_id.as_str()).collect();
        assert!(train_patients.is_disjoint(&test_patients));
    }

    #[test]
    fn spurious_mentions_add_false_positives() {
        let cfg = SynthConfig {
            spurious_rate: 1.0,
            n_train: 100,
            n_test: 10,
            ..small_cfg()
        };
        let out = synth_generate(&cfg).unwrap();
        assert_eq!(out.stats.spurious_mentions as usize, out.records.len());
        let corpus = build_corpus(&out.records, &out.ontology);
        let with_extra = corpus
            .iter()
            .filter(|(record, mined)| {
                let truth = record.truth_labels.as_ref().unwrap();
                Ont::to_id_set(mined).iter().any(|id| !truth.contains(id))
            })
            .count();
        assert!(with_extra > corpus.len() / 2);
    }
}
