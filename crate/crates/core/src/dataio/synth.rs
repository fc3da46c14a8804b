//! Synthetic benchmark generator.
//!
//! Every class owns a visual direction built from the pseudo-embeddings of
//! its vocabulary: a group part shared by all classes in the same group and
//! a class-specific part scaled by the proximity factor. Frames are the
//! class direction times the separation plus AR(1) Gaussian noise.
//! Anomalous videos embed one contiguous burst of class frames inside
//! normal frames, and the burst is exactly what `frame_gt` marks.
//!
//! Group-guided descriptions are written from the same vocabulary, so their
//! pseudo-embeddings land near the visual directions. With guidance off the
//! group vocabulary is replaced by class-private filler words, which keeps
//! description lengths equal but removes all shared tokens.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{encode_rle, manifest_to_string, write_atomic, write_feature_file, DataError, Dataset, ManifestRow, Result, RowSplit, Video};
use crate::tensor::Tensor;
use crate::textbank::prompts::{concept_prompt, desc_prompt, group_prompt};
use crate::textbank::{default_concept_count, DescriptionSet, EmbeddingProvider, FixtureStore, Label, LabelSpace, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClass {
    pub name: String,
    pub split: Split,
    pub group: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub dim: usize,
    /// Seed of the pseudo text encoder the visual directions are built from.
    pub embed_seed: u64,
    pub normal_name: String,
    /// Anomaly classes; the normal class is implicit.
    pub classes: Vec<SynthClass>,
    /// Training videos per normal or base class (novel classes get none).
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Inclusive frame-count range.
    pub frames: (usize, usize),
    /// Inclusive range of the burst length as a fraction of the video.
    pub burst_fraction: (f64, f64),
    pub separation: f64,
    /// Weight of the class-specific direction relative to the group direction.
    pub proximity: f64,
    /// Per-dimension standard deviation of the frame noise.
    pub noise: f64,
    /// Lag-one autocorrelation of the frame noise.
    pub ar_coeff: f64,
    pub group_tokens: usize,
    pub unique_tokens: usize,
    pub concepts_per_class: usize,
    pub group_guided: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let class = |name: &str, split, group: &str| SynthClass {
            name: name.into(),
            split,
            group: group.into(),
        };
        Self {
            seed: 7,
            dim: 16,
            embed_seed: 0,
            normal_name: "normal".into(),
            classes: vec![
                class("assault", Split::Base, "contact"),
                class("arson", Split::Base, "fire"),
                class("brawl", Split::Novel, "contact"),
                class("vandalism", Split::Novel, "damage"),
            ],
            train_per_class: 20,
            test_per_class: 10,
            frames: (32, 128),
            burst_fraction: (0.3, 0.6),
            separation: 1.0,
            proximity: 0.8,
            noise: 0.2,
            ar_coeff: 0.5,
            group_tokens: 8,
            unique_tokens: 6,
            concepts_per_class: 8,
            group_guided: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DataError::Validation(m));
        let count = |s: Split| self.classes.iter().filter(|c| c.split == s).count();
        if count(Split::Base) == 0 {
            return fail("synthetic spec needs at least one base class".into());
        }
        if count(Split::Novel) == 0 {
            return fail("synthetic spec needs at least one novel class".into());
        }
        if count(Split::Normal) > 0 {
            return fail("the normal class is implicit; classes must be base or novel".into());
        }
        if self.dim == 0 {
            return fail("dim must be positive".into());
        }
        let (lo, hi) = self.frames;
        if lo < 1 || lo > hi {
            return fail(format!("invalid frame range {lo}..={hi}"));
        }
        let (a, b) = self.burst_fraction;
        if !(a > 0.0 && a <= b && b <= 1.0) {
            return fail(format!("burst fractions must satisfy 0 < {a} <= {b} <= 1"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return fail("video counts per class must be positive".into());
        }
        if self.group_tokens == 0 || self.unique_tokens == 0 {
            return fail("token counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ar_coeff) || self.noise < 0.0 || self.separation < 0.0 {
            return fail("noise must be non-negative and ar_coeff in [0, 1)".into());
        }
        let mut names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.push(&self.normal_name);
        let all = names.len();
        names.sort_unstable();
        names.dedup();
        if names.len() != all {
            return fail("class names must be unique".into());
        }
        let bad = |s: &str| s.is_empty() || !s.chars().all(|c| c.is_ascii_alphanumeric());
        if names.iter().any(|n| bad(n)) || self.classes.iter().any(|c| bad(&c.group)) {
            return fail("class and group names must be non-empty ASCII alphanumeric".into());
        }
        Ok(())
    }

    fn normal_group(&self) -> String {
        format!("{}scene", self.normal_name)
    }
}

/// Generated corpus held in memory.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub labels: LabelSpace,
    pub descriptions: DescriptionSet,
    pub nouns: Vec<String>,
    pub rows: Vec<ManifestRow>,
    pub features: Vec<Tensor<f32>>,
    /// Canned answers for the prompts the text pipeline issues.
    pub fixture: FixtureStore,
}

fn words(prefix: &str, count: usize) -> Vec<String> {
    (0..count).map(|j| format!("{prefix}{j}")).collect()
}

fn unit(v: &[f32]) -> Vec<f64> {
    let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    v.iter().map(|x| f64::from(*x) / n).collect()
}

fn class_direction(spec: &SynthSpec, group: &str, name: &str) -> Result<Vec<f64>> {
    let enc = EmbeddingProvider::pseudo(spec.dim, spec.embed_seed);
    let embed = |text: String| enc.embed(&text).map_err(|e| DataError::Validation(e.to_string()));
    let g = embed(words(group, spec.group_tokens).join(" "))?;
    let u = embed(words(name, spec.unique_tokens).join(" "))?;
    let mixed: Vec<f32> = g
        .iter()
        .zip(&u)
        .map(|(a, b)| (f64::from(*a) + spec.proximity * f64::from(*b)) as f32)
        .collect();
    Ok(unit(&mixed))
}

fn description(spec: &SynthSpec, group: &str, name: &str) -> String {
    let shared = if spec.group_guided {
        words(group, spec.group_tokens)
    } else {
        words(&format!("{name}alt"), spec.group_tokens)
    };
    let mut w = shared;
    w.extend(words(name, spec.unique_tokens));
    w.join(" ")
}

struct Sampler<'a> {
    spec: &'a SynthSpec,
    rng: ChaCha8Rng,
}

impl Sampler<'_> {
    fn video(&mut self, normal: &[f64], class: Option<&[f64]>) -> (Tensor<f32>, Vec<u8>) {
        let s = self.spec;
        let n = self.rng.random_range(s.frames.0..=s.frames.1);
        let mut gt = vec![0u8; n];
        if class.is_some() {
            let frac = self.rng.random_range(s.burst_fraction.0..=s.burst_fraction.1);
            let len = ((frac * n as f64).round() as usize).clamp(1, n);
            let start = self.rng.random_range(0..=n - len);
            gt[start..start + len].fill(1);
        }
        let d = s.dim;
        let innov = (1.0 - s.ar_coeff * s.ar_coeff).sqrt() * s.noise;
        let mut e: Vec<f64> = (0..d)
            .map(|_| s.noise * { let z: f64 = StandardNormal.sample(&mut self.rng); z })
            .collect();
        let mut data = Vec::with_capacity(n * d);
        for &flag in &gt {
            let center = match (flag, class) {
                (1, Some(c)) => c,
                _ => normal,
            };
            for (j, ej) in e.iter_mut().enumerate() {
                if data.len() >= d {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    *ej = s.ar_coeff * *ej + innov * z;
                }
                data.push((s.separation * center[j] + *ej) as f32);
            }
        }
        (Tensor::new(vec![n, d], data).expect("shape"), gt)
    }
}

/// Builds the corpus for `spec`; identical specs give bitwise-identical corpora.
pub fn generate_synthetic_benchmark(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let normal_group = spec.normal_group();
    let mut label_list = vec![Label {
        index: 0,
        name: spec.normal_name.clone(),
        split: Split::Normal,
        group: normal_group.clone(),
    }];
    for (i, c) in spec.classes.iter().enumerate() {
        label_list.push(Label {
            index: i + 1,
            name: c.name.clone(),
            split: c.split,
            group: c.group.clone(),
        });
    }
    let labels = LabelSpace::new(label_list).map_err(|e| DataError::Validation(e.to_string()))?;

    let mut descriptions = BTreeMap::new();
    for l in labels.labels() {
        descriptions.insert(l.index, description(spec, &l.group, &l.name));
    }
    let descriptions = DescriptionSet {
        groups: labels.groups(),
        descriptions,
    };

    let mut nouns = Vec::new();
    for c in &spec.classes {
        let g = words(&c.group, spec.group_tokens);
        let u = words(&c.name, spec.unique_tokens);
        for j in 0..spec.concepts_per_class {
            let noun = format!("{} {}", g[j % g.len()], u[(j / g.len() + j) % u.len()]);
            if !nouns.contains(&noun) {
                nouns.push(noun);
            }
        }
    }

    let mut fixture = FixtureStore::default();
    let names = |idx: &[usize]| -> Vec<&str> { idx.iter().map(|&i| labels.labels()[i].name.as_str()).collect() };
    let anomaly_idx: Vec<usize> = (1..labels.len()).collect();
    let groups: Vec<Vec<&str>> = descriptions.groups.values().map(|m| names(m)).collect();
    fixture.insert(
        &group_prompt(&names(&anomaly_idx)),
        serde_json::json!({ "groups": groups }).to_string(),
    );
    let mut members: Vec<Vec<usize>> = vec![vec![0]];
    members.extend(descriptions.groups.values().cloned());
    for m in &members {
        let answer: BTreeMap<&str, &str> = m
            .iter()
            .map(|&i| (labels.labels()[i].name.as_str(), descriptions.descriptions[&i].as_str()))
            .collect();
        fixture.insert(
            &desc_prompt(&names(m)),
            serde_json::json!({ "descriptions": answer }).to_string(),
        );
    }
    fixture.insert(
        &concept_prompt(&names(&anomaly_idx), default_concept_count(&labels)),
        serde_json::json!({ "nouns": nouns }).to_string(),
    );

    let normal_dir = class_direction(spec, &normal_group, &spec.normal_name)?;
    let dirs: Vec<Vec<f64>> = spec
        .classes
        .iter()
        .map(|c| class_direction(spec, &c.group, &c.name))
        .collect::<Result<_>>()?;

    let mut sampler = Sampler {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    };
    let mut rows = Vec::new();
    let mut features = Vec::new();
    for split in [RowSplit::Train, RowSplit::Test] {
        for l in labels.labels() {
            let count = match (split, l.split) {
                (RowSplit::Train, Split::Novel) => 0,
                (RowSplit::Train, _) => spec.train_per_class,
                (RowSplit::Test, _) => spec.test_per_class,
            };
            let class = (l.index > 0).then(|| dirs[l.index - 1].as_slice());
            for i in 0..count {
                let (x, gt) = sampler.video(&normal_dir, class);
                let tag = match split {
                    RowSplit::Train => "train",
                    RowSplit::Test => "test",
                };
                let id = format!("{tag}_{}_{i:03}", l.name);
                rows.push(ManifestRow {
                    feature_path: format!("features/{id}.azf").into(),
                    video_id: id,
                    label_index: l.index,
                    split,
                    frame_gt: Some(encode_rle(&gt)),
                });
                features.push(x);
            }
        }
    }

    Ok(SynthCorpus {
        spec: spec.clone(),
        labels,
        descriptions,
        nouns,
        rows,
        features,
        fixture,
    })
}

impl SynthCorpus {
    /// The corpus as a loaded dataset, without touching the disk.
    pub fn dataset(&self) -> Dataset {
        let mut ds = Dataset {
            dim: self.spec.dim,
            ..Dataset::default()
        };
        for (row, x) in self.rows.iter().zip(&self.features) {
            let v = Video {
                id: row.video_id.clone(),
                features: x.clone(),
                label: row.label_index,
                label_split: self.labels.labels()[row.label_index].split,
                frame_gt: row.frame_gt.as_deref().map(|r| super::decode_rle(r).expect("valid rle")),
            };
            match row.split {
                RowSplit::Train => ds.train.push(v),
                RowSplit::Test => ds.test.push(v),
            }
        }
        ds
    }

    /// Writes `labels.json`, `manifest.jsonl`, `features/`, and the text
    /// fixtures under `fixtures/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let io = |p: &Path, e| DataError::io(p, e);
        for (row, x) in self.rows.iter().zip(&self.features) {
            write_feature_file(&dir.join(&row.feature_path), x)?;
        }
        let text = |e: crate::textbank::TextError| DataError::Validation(e.to_string());
        self.labels.save(&dir.join("labels.json")).map_err(text)?;
        let manifest = dir.join("manifest.jsonl");
        write_atomic(&manifest, manifest_to_string(&self.rows).as_bytes()).map_err(|e| io(&manifest, e))?;
        let fx = dir.join("fixtures");
        self.descriptions.save(&fx.join("descriptions.json")).map_err(text)?;
        let concepts = fx.join("concepts.json");
        let body = serde_json::to_string_pretty(&serde_json::json!({ "nouns": self.nouns })).expect("nouns serialize");
        write_atomic(&concepts, body.as_bytes()).map_err(|e| io(&concepts, e))?;
        self.fixture.save(&fx.join("llm.json")).map_err(text)?;
        let spec = dir.join("synth_spec.json");
        let body = serde_json::to_string_pretty(&self.spec).expect("spec serializes");
        write_atomic(&spec, body.as_bytes()).map_err(|e| io(&spec, e))
    }
}
