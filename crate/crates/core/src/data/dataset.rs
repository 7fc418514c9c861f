//! Samples, datasets, the on-disk index format and LOSO folds.
//!
//! # Index files
//!
//! A dataset directory holds one subdirectory per subject plus an index file:
//!
//! ```text
//! mmnet-index 1
//! class 0 happiness
//! class 1 surprise
//! sample id=s01_000 subject=s01 label=0 onset=s01/a.ppm apex=s01/b.ppm onset_candidates=s01/c0.ppm,s01/c1.ppm apex_candidates=s01/d0.ppm,s01/d1.ppm
//! ```
//!
//! Paths are relative to the index file and may not contain whitespace or
//! commas. An optional `regions=x0:y0:x1:y1;...` key lists half-open boxes
//! (in source pixels) where the expression is known to happen. Blank lines
//! and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INDEX_HEADER: &str = "mmnet-index 1";

/// Half-open pixel box `[x0,x1) x [y0,y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

/// One labelled onset/apex pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub subject: String,
    pub label: usize,
    pub canonical_onset: Tensor,
    pub canonical_apex: Tensor,
    pub onset_candidates: Vec<Tensor>,
    pub apex_candidates: Vec<Tensor>,
    /// Boxes containing the expression, when known.
    pub regions: Vec<Rect>,
}

impl SamplePair {
    fn validate(&self) -> Result<()> {
        if self.onset_candidates.is_empty() || self.apex_candidates.is_empty() {
            return Err(Error::Protocol(format!("sample {} has an empty candidate list", self.id)));
        }
        let shape = self.canonical_onset.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Protocol(format!("sample {} images must be RGB, got {shape:?}", self.id)));
        }
        let all = std::iter::once(&self.canonical_apex).chain(&self.onset_candidates).chain(&self.apex_candidates);
        for t in all {
            if t.shape() != shape {
                return Err(Error::Protocol(format!(
                    "sample {} mixes image sizes {:?} and {:?}",
                    self.id,
                    shape,
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<SamplePair>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, samples: Vec<SamplePair>) -> Result<Self> {
        for s in &samples {
            if s.label >= class_names.len() {
                return Err(Error::Label { label: s.label, num_classes: class_names.len() });
            }
            s.validate()?;
        }
        Ok(Self { class_names, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Distinct subjects in order of first appearance.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for s in &self.samples {
            if !seen.contains(&s.subject) {
                seen.push(s.subject.clone());
            }
        }
        seen
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

/// One leave-one-subject-out split. Indices refer to the parent dataset.
#[derive(Clone, Debug)]
pub struct Fold {
    pub subject: String,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
}

/// One fold per subject, in order of first appearance.
pub fn loso_folds(ds: &Dataset) -> Result<Vec<Fold>> {
    let subjects = ds.subjects();
    if subjects.len() < 2 {
        return Err(Error::Protocol(format!(
            "leave-one-subject-out needs at least 2 subjects, found {}",
            subjects.len()
        )));
    }
    Ok(subjects
        .into_iter()
        .map(|subject| {
            let (test_indices, train_indices): (Vec<usize>, Vec<usize>) =
                (0..ds.len()).partition(|&i| ds.samples[i].subject == subject);
            Fold {
                train: ds.subset(&train_indices),
                test: ds.subset(&test_indices),
                subject,
                train_indices,
                test_indices,
            }
        })
        .collect())
}

fn parse_err(line_no: usize, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("index line {line_no}: {msg}"))
}

fn parse_regions(text: &str, line_no: usize) -> Result<Vec<Rect>> {
    text.split(';')
        .filter(|s| !s.is_empty())
        .map(|r| {
            let v: Vec<usize> = r
                .split(':')
                .map(|n| n.parse().map_err(|_| parse_err(line_no, format!("bad region `{r}`"))))
                .collect::<Result<_>>()?;
            match v[..] {
                [x0, y0, x1, y1] if x0 < x1 && y0 < y1 => Ok(Rect { x0, y0, x1, y1 }),
                _ => Err(parse_err(line_no, format!("bad region `{r}`"))),
            }
        })
        .collect()
}

/// Load an index file and every image it references.
pub fn load_index(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, h)) if h == INDEX_HEADER => {}
        _ => return Err(Error::Format(format!("index must start with `{INDEX_HEADER}`"))),
    }
    let mut classes = BTreeMap::<usize, String>::new();
    let mut samples = Vec::new();
    for (no, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("class") => {
                let idx = toks.next().and_then(|t| t.parse().ok()).ok_or_else(|| parse_err(no, "bad class index"))?;
                let name = toks.next().ok_or_else(|| parse_err(no, "missing class name"))?;
                if classes.insert(idx, name.to_string()).is_some() {
                    return Err(parse_err(no, format!("class {idx} declared twice")));
                }
            }
            Some("sample") => {
                let kv: BTreeMap<&str, &str> = toks
                    .map(|t| t.split_once('=').ok_or_else(|| parse_err(no, format!("expected key=value, got `{t}`"))))
                    .collect::<Result<_>>()?;
                let get = |k: &str| kv.get(k).copied().ok_or_else(|| parse_err(no, format!("missing `{k}`")));
                let img = |p: &str| image::load(&root.join(p));
                let list = |k: &str| -> Result<Vec<Tensor>> { get(k)?.split(',').map(img).collect() };
                samples.push(SamplePair {
                    id: get("id")?.to_string(),
                    subject: get("subject")?.to_string(),
                    label: get("label")?.parse().map_err(|_| parse_err(no, "bad label"))?,
                    canonical_onset: img(get("onset")?)?,
                    canonical_apex: img(get("apex")?)?,
                    onset_candidates: list("onset_candidates")?,
                    apex_candidates: list("apex_candidates")?,
                    regions: kv.get("regions").map(|r| parse_regions(r, no)).transpose()?.unwrap_or_default(),
                });
            }
            Some(other) => return Err(parse_err(no, format!("unknown record `{other}`"))),
            None => {}
        }
    }
    let class_names: Vec<String> = classes.values().cloned().collect();
    if classes.keys().copied().ne(0..class_names.len()) {
        return Err(Error::Format("class indices must be 0..K without gaps".into()));
    }
    Dataset::new(class_names, samples)
}

/// Write `ds` as `<dir>/index.txt` plus one PPM directory per subject.
pub fn write_index(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut out = format!("{INDEX_HEADER}\n");
    for (i, name) in ds.class_names.iter().enumerate() {
        writeln!(out, "class {i} {name}").unwrap();
    }
    for s in &ds.samples {
        std::fs::create_dir_all(dir.join(&s.subject))?;
        let put = |tag: String, t: &Tensor| -> Result<String> {
            let rel = format!("{}/{}_{tag}.ppm", s.subject, s.id);
            image::save(&dir.join(&rel), t)?;
            Ok(rel)
        };
        let onset = put("onset".into(), &s.canonical_onset)?;
        let apex = put("apex".into(), &s.canonical_apex)?;
        let oc = s.onset_candidates.iter().enumerate().map(|(k, t)| put(format!("onset{k}"), t)).collect::<Result<Vec<_>>>()?;
        let ac = s.apex_candidates.iter().enumerate().map(|(k, t)| put(format!("apex{k}"), t)).collect::<Result<Vec<_>>>()?;
        write!(
            out,
            "sample id={} subject={} label={} onset={onset} apex={apex} onset_candidates={} apex_candidates={}",
            s.id,
            s.subject,
            s.label,
            oc.join(","),
            ac.join(",")
        )
        .unwrap();
        if !s.regions.is_empty() {
            let r: Vec<String> = s.regions.iter().map(|r| format!("{}:{}:{}:{}", r.x0, r.y0, r.x1, r.y1)).collect();
            write!(out, " regions={}", r.join(";")).unwrap();
        }
        out.push('\n');
    }
    std::fs::write(dir.join("index.txt"), out)?;
    Ok(())
}
