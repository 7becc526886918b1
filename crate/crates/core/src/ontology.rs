//! Hierarchical label lexicon: loading, validation, and ancestor expansion.
//!
//! The lexicon is a list of labels with synonyms and parent links forming a
//! DAG. Ids are assigned by file order so label-vector layout is reproducible
//! across runs. The synonym index is keyed by the canonical (tokenized and
//! lemmatized) form of each term, shared with the sentence-matching side.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textmine::canonical_term;

/// Index of a label in the ontology, in `[0, K)`.
pub type LabelId = usize;

/// K-dimensional binary target vector.
pub type LabelVector = Vec<bool>;

/// The three label classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    BodyPart,
    FindingType,
    Attribute,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::BodyPart, Category::FindingType, Category::Attribute];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::BodyPart => "body_part",
            Category::FindingType => "finding_type",
            Category::Attribute => "attribute",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "body_part" => Ok(Category::BodyPart),
            "finding_type" => Ok(Category::FindingType),
            "attribute" => Ok(Category::Attribute),
            other => Err(format!("unknown category {other:?}")),
        }
    }
}

/// One label definition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelDef {
    pub id: LabelId,
    pub name: String,
    pub category: Category,
    pub synonyms: Vec<String>,
    pub parents: Vec<LabelId>,
}

/// One row of a lexicon before id/parent resolution. Used by the file loader
/// and by the synthetic-corpus generator.
#[derive(Debug, Clone)]
pub struct LexiconRow {
    pub name: String,
    pub category: Category,
    pub synonyms: Vec<String>,
    pub parents: Vec<String>,
}

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("failed to read lexicon: {0}")]
    Io(#[from] std::io::Error),
    #[error("lexicon line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate synonym {term:?} maps to both {first:?} and {second:?}")]
    DuplicateSynonym {
        term: String,
        first: String,
        second: String,
    },
    #[error("label {label:?} references unknown parent {parent:?}")]
    DanglingParent { label: String, parent: String },
    #[error("parent cycle involving label {label:?}")]
    Cycle { label: String },
    #[error("lexicon contains no labels")]
    Empty,
}

/// Validated, immutable label hierarchy. Safe for concurrent reads.
#[derive(Debug, Clone)]
pub struct Ontology {
    labels: Vec<LabelDef>,
    synonym_index: HashMap<String, LabelId>,
    ancestor_sets: Vec<Vec<LabelId>>,
    max_synonym_tokens: usize,
}

/// Loads and validates a lexicon file.
///
/// Format: UTF-8 TSV, one label per line,
/// `name<TAB>category<TAB>syn1|syn2<TAB>parent1|parent2`; trailing cells may
/// be empty or omitted, `#`-prefixed lines and blank lines are ignored.
pub fn load_ontology(path: impl AsRef<Path>) -> Result<Ontology, OntologyError> {
    Ontology::load(path)
}

impl Ontology {
    pub fn load(path: impl AsRef<Path>) -> Result<Ontology, OntologyError> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Ontology, OntologyError> {
        let mut rows = Vec::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw_line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() > 4 {
                return Err(OntologyError::Parse {
                    line: line_no,
                    message: format!("expected at most 4 tab-separated cells, got {}", cells.len()),
                });
            }
            let name = normalize_surface(cells[0]);
            if name.is_empty() {
                return Err(OntologyError::Parse {
                    line: line_no,
                    message: "empty label name".into(),
                });
            }
            let category = cells
                .get(1)
                .map(|c| c.trim())
                .filter(|c| !c.is_empty())
                .ok_or_else(|| OntologyError::Parse {
                    line: line_no,
                    message: format!("label {name:?} is missing a category"),
                })
                .and_then(|c| {
                    Category::from_str(c).map_err(|message| OntologyError::Parse {
                        line: line_no,
                        message,
                    })
                })?;
            let synonyms = split_list(cells.get(2).copied().unwrap_or(""));
            let parents = split_list(cells.get(3).copied().unwrap_or(""));
            rows.push(LexiconRow {
                name,
                category,
                synonyms,
                parents,
            });
        }
        Self::from_rows(rows)
    }

    /// Builds a validated ontology from rows; ids are assigned by row order.
    pub fn from_rows(rows: Vec<LexiconRow>) -> Result<Ontology, OntologyError> {
        if rows.is_empty() {
            return Err(OntologyError::Empty);
        }

        // Resolve parent names against canonical label names.
        let mut name_to_id: HashMap<String, LabelId> = HashMap::new();
        for (id, row) in rows.iter().enumerate() {
            // collisions caught below through the synonym index
            name_to_id.entry(canonical_term(&row.name)).or_insert(id);
        }

        let mut labels = Vec::with_capacity(rows.len());
        let mut synonym_index: HashMap<String, LabelId> = HashMap::new();
        let mut max_synonym_tokens = 0;

        let index_term = |term: &str,
                              id: LabelId,
                              labels_so_far: &[LabelDef],
                              row_name: &str,
                              index: &mut HashMap<String, LabelId>|
         -> Result<usize, OntologyError> {
            let canon = canonical_term(term);
            if canon.is_empty() {
                return Err(OntologyError::Parse {
                    line: 0,
                    message: format!("label {row_name:?} has an empty synonym {term:?}"),
                });
            }
            let width = canon.split(' ').count();
            match index.get(&canon) {
                Some(&existing) if existing != id => {
                    return Err(OntologyError::DuplicateSynonym {
                        term: canon,
                        first: labels_so_far[existing].name.clone(),
                        second: row_name.to_string(),
                    });
                }
                _ => {
                    index.insert(canon, id);
                }
            }
            Ok(width)
        };

        for (id, row) in rows.iter().enumerate() {
            let mut parents = Vec::with_capacity(row.parents.len());
            for parent in &row.parents {
                let canon = canonical_term(parent);
                match name_to_id.get(&canon) {
                    Some(&pid) => parents.push(pid),
                    None => {
                        return Err(OntologyError::DanglingParent {
                            label: row.name.clone(),
                            parent: normalize_surface(parent),
                        });
                    }
                }
            }
            parents.sort_unstable();
            parents.dedup();

            let w = index_term(&row.name, id, &labels, &row.name, &mut synonym_index)?;
            max_synonym_tokens = max_synonym_tokens.max(w);
            let mut synonyms = Vec::new();
            for syn in &row.synonyms {
                let w = index_term(syn, id, &labels, &row.name, &mut synonym_index)?;
                max_synonym_tokens = max_synonym_tokens.max(w);
                synonyms.push(normalize_surface(syn));
            }

            labels.push(LabelDef {
                id,
                name: row.name.clone(),
                category: row.category,
                synonyms,
                parents,
            });
        }

        let ancestor_sets = compute_ancestors(&labels)?;

        Ok(Ontology {
            labels,
            synonym_index,
            ancestor_sets,
            max_synonym_tokens,
        })
    }

    /// Number of labels K.
    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label(&self, id: LabelId) -> &LabelDef {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[LabelDef] {
        &self.labels
    }

    /// Looks up a label id by the canonical form of a term.
    pub fn lookup_synonym(&self, canonical: &str) -> Option<LabelId> {
        self.synonym_index.get(canonical).copied()
    }

    /// Resolves a label name (or synonym) to its id.
    pub fn resolve(&self, term: &str) -> Option<LabelId> {
        self.lookup_synonym(&canonical_term(term))
    }

    /// Widest synonym in tokens; bounds the matcher's scan window.
    pub fn max_synonym_tokens(&self) -> usize {
        self.max_synonym_tokens
    }

    /// All transitive ancestors of `id`, excluding `id` itself, sorted.
    ///
    /// Panics if `id >= K`.
    pub fn ancestors(&self, id: LabelId) -> &[LabelId] {
        &self.ancestor_sets[id]
    }

    /// Closes a label set under the parent hierarchy: the result contains
    /// every input id plus all of its ancestors.
    pub fn expand(&self, ids: impl IntoIterator<Item = LabelId>) -> BTreeSet<LabelId> {
        let mut out = BTreeSet::new();
        for id in ids {
            out.insert(id);
            out.extend(self.ancestors(id).iter().copied());
        }
        out
    }

    /// Binary vector of length K with ones at the given ids.
    pub fn to_vector(&self, ids: &BTreeSet<LabelId>) -> LabelVector {
        let mut v = vec![false; self.labels.len()];
        for &id in ids {
            v[id] = true;
        }
        v
    }

    /// Ids set from a binary vector.
    pub fn to_id_set(vector: &LabelVector) -> BTreeSet<LabelId> {
        vector
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(i, _)| i)
            .collect()
    }

    /// Label count per category.
    pub fn category_counts(&self) -> HashMap<Category, usize> {
        let mut counts = HashMap::new();
        for l in &self.labels {
            *counts.entry(l.category).or_insert(0) += 1;
        }
        counts
    }

    /// Length of the longest parent chain in the DAG.
    pub fn dag_depth(&self) -> usize {
        let mut depth = vec![0usize; self.labels.len()];
        let order = topo_order(&self.labels).expect("validated DAG");
        for &id in &order {
            depth[id] = self.labels[id]
                .parents
                .iter()
                .map(|&p| depth[p] + 1)
                .max()
                .unwrap_or(0);
        }
        depth.into_iter().max().unwrap_or(0)
    }

    /// Writes the ontology back out in the lexicon TSV format.
    pub fn write_lexicon(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "# name\tcategory\tsynonyms\tparents")?;
        for l in &self.labels {
            let parents: Vec<&str> = l.parents.iter().map(|&p| self.labels[p].name.as_str()).collect();
            writeln!(
                f,
                "{}\t{}\t{}\t{}",
                l.name,
                l.category,
                l.synonyms.join("|"),
                parents.join("|")
            )?;
        }
        Ok(())
    }
}

/// Lowercase and collapse internal whitespace.
fn normalize_surface(term: &str) -> String {
    term.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn split_list(cell: &str) -> Vec<String> {
    cell.split('|')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Topological order over parent edges (parents before children), or the
/// name of a label on a cycle.
fn topo_order(labels: &[LabelDef]) -> Result<Vec<LabelId>, LabelId> {
    let n = labels.len();
    let mut children: Vec<Vec<LabelId>> = vec![Vec::new(); n];
    let mut pending_parents: Vec<usize> = vec![0; n];
    for l in labels {
        pending_parents[l.id] = l.parents.len();
        for &p in &l.parents {
            children[p].push(l.id);
        }
    }
    let mut queue: Vec<LabelId> = (0..n).filter(|&i| pending_parents[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    let mut head = 0;
    while head < queue.len() {
        let id = queue[head];
        head += 1;
        order.push(id);
        for &c in &children[id] {
            pending_parents[c] -= 1;
            if pending_parents[c] == 0 {
                queue.push(c);
            }
        }
    }
    if order.len() == n {
        Ok(order)
    } else {
        // every unresolved label sits on or below a cycle; find one actually
        // on a cycle by walking parent edges until a repeat
        let start = (0..n).find(|&i| pending_parents[i] > 0).unwrap();
        let mut seen = vec![false; n];
        let mut cur = start;
        loop {
            if seen[cur] {
                return Err(cur);
            }
            seen[cur] = true;
            cur = *labels[cur]
                .parents
                .iter()
                .find(|&&p| pending_parents[p] > 0)
                .expect("unresolved label has an unresolved parent");
        }
    }
}

fn compute_ancestors(labels: &[LabelDef]) -> Result<Vec<Vec<LabelId>>, OntologyError> {
    let order = topo_order(labels).map_err(|id| OntologyError::Cycle {
        label: labels[id].name.clone(),
    })?;
    let mut sets: Vec<BTreeSet<LabelId>> = vec![BTreeSet::new(); labels.len()];
    for &id in &order {
        let mut acc = BTreeSet::new();
        for &p in &labels[id].parents {
            acc.insert(p);
            acc.extend(sets[p].iter().copied());
        }
        sets[id] = acc;
    }
    Ok(sets.into_iter().map(|s| s.into_iter().collect()).collect())
}
