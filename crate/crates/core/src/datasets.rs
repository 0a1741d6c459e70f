//! Seeded synthetic classification tasks, splits and the `.fgd` file format.
//!
//! Every task draws 16×16 single-channel images of oriented sinusoid
//! gratings: each class has its own frequency, orientation and phase, items
//! vary in amplitude and phase jitter, and Gaussian pixel noise plus a small
//! fraction of mislabelled items keeps single-task accuracy just below one.

use std::collections::{BTreeMap, BTreeSet};
use std::f32::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{ForgeError, Result};
use crate::numerics::{SeededRng, Tensor};

const DATASET_MAGIC: &[u8; 4] = b"FGDS";
pub const DATASET_VERSION: u8 = 1;

pub const IMAGE_SIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub labels: Vec<String>,
    pub input_shape: Vec<usize>,
    /// Items come in groups (patients, slides) evaluated group-wise.
    #[serde(default)]
    pub grouped: bool,
}

impl TaskSpec {
    pub fn new(
        name: &str,
        labels: &[&str],
        input_shape: Vec<usize>,
        grouped: bool,
    ) -> Result<Self> {
        let spec = Self {
            name: name.to_string(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            input_shape,
            grouped,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() < 2 {
            return Err(ForgeError::Validation(format!(
                "task {:?} needs at least two classes",
                self.name
            )));
        }
        let distinct: BTreeSet<&String> = self.labels.iter().collect();
        if distinct.len() != self.labels.len() {
            return Err(ForgeError::Validation(format!(
                "task {:?} has duplicate labels",
                self.name
            )));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(ForgeError::Validation(format!(
                "task {:?} has input shape {:?}",
                self.name, self.input_shape
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Full,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
            Split::Full => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Split::Train),
            1 => Ok(Split::Test),
            2 => Ok(Split::Full),
            other => Err(ForgeError::Format(format!("unknown split tag {other}"))),
        }
    }
}

/// `N` flattened inputs with class indices and optional group ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub task: String,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub group_ids: Option<Vec<u32>>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(
        task: &str,
        inputs: Tensor,
        labels: Vec<usize>,
        group_ids: Option<Vec<u32>>,
        split: Split,
    ) -> Result<Self> {
        let (n, _) = inputs.dims2()?;
        if labels.len() != n || group_ids.as_ref().is_some_and(|g| g.len() != n) {
            return Err(ForgeError::Shape(format!(
                "{n} inputs, {} labels, {:?} group ids",
                labels.len(),
                group_ids.as_ref().map(Vec::len)
            )));
        }
        Ok(Self {
            task: task.to_string(),
            inputs,
            labels,
            group_ids,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&y| y >= num_classes) {
            Some(y) => Err(ForgeError::Index(format!(
                "label {y} with {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// Inputs and labels of the given items, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let dim = self.input_dim();
        let mut x = Vec::with_capacity(indices.len() * dim);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(ForgeError::Index(format!("item {i} of {}", self.len())));
            }
            x.extend_from_slice(self.inputs.row(i));
            y.push(self.labels[i]);
        }
        Ok((Tensor::matrix(indices.len(), dim, x)?, y))
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let (inputs, labels) = self.gather(indices)?;
        let group_ids = self
            .group_ids
            .as_ref()
            .map(|g| indices.iter().map(|&i| g[i]).collect());
        Self::new(&self.task, inputs, labels, group_ids, split)
    }

    /// Item indices per class, for classes `0..num_classes`.
    pub fn indices_by_class(&self, num_classes: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            if y < num_classes {
                out[y].push(i);
            }
        }
        out
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        self.indices_by_class(num_classes)
            .iter()
            .map(Vec::len)
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(DATASET_MAGIC).u8(DATASET_VERSION);
        w.str(&self.task).unwrap();
        w.u8(self.split.code());
        w.len_u32(self.len()).unwrap();
        for &y in &self.labels {
            w.len_u32(y).unwrap();
        }
        match &self.group_ids {
            Some(g) => {
                w.u8(1);
                for &id in g {
                    w.u32(id);
                }
            }
            None => {
                w.u8(0);
            }
        }
        self.inputs.write_to(&mut w).unwrap();
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(DATASET_MAGIC)?;
        r.expect_version("dataset", DATASET_VERSION)?;
        let task = r.str()?;
        let split = Split::from_code(r.u8()?)?;
        let n = r.u32()? as usize;
        if n > r.remaining() {
            return Err(ForgeError::Format(format!("implausible item count {n}")));
        }
        let labels = (0..n)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let group_ids = match r.u8()? {
            0 => None,
            1 => Some((0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?),
            other => return Err(ForgeError::Format(format!("bad group flag {other}"))),
        };
        let inputs = Tensor::read_from(&mut r)?;
        r.finish()?;
        if inputs.rank() != 2 {
            return Err(ForgeError::Format(format!(
                "inputs of shape {:?}",
                inputs.shape()
            )));
        }
        Self::new(&task, inputs, labels, group_ids, split)
            .map_err(|e| ForgeError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// A generated task with its train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTask {
    pub spec: TaskSpec,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

#[derive(Debug, Clone, Copy)]
struct Grating {
    freq: f32,
    angle: f32,
    phase: f32,
}

impl Grating {
    fn render(&self, amplitude: f32, phase_jitter: f32, out: &mut [f32]) {
        let (s, c) = self.angle.sin_cos();
        for i in 0..IMAGE_SIDE {
            for j in 0..IMAGE_SIDE {
                let t = (i as f32 * c + j as f32 * s) / IMAGE_SIDE as f32;
                out[i * IMAGE_SIDE + j] +=
                    amplitude * (2.0 * PI * self.freq * t + self.phase + phase_jitter).sin();
            }
        }
    }
}

const NOISE_STD: f32 = 0.6;
const PHASE_JITTER: f32 = 0.3;
const MISLABEL_RATE: f64 = 0.04;
const GROUP_MISLABEL_RATE: f64 = 0.08;

fn grating(freq: f32, angle_deg: f32, phase: f32) -> Grating {
    Grating {
        freq,
        angle: angle_deg.to_radians(),
        phase,
    }
}

fn draw_item(pattern: &Grating, extra_offset: Option<&[f32]>, rng: &mut SeededRng) -> Vec<f32> {
    let mut img = rng.normal_vec(IMAGE_SIDE * IMAGE_SIDE, 0.0, NOISE_STD);
    let amplitude = rng.uniform(0.8, 1.2);
    let jitter = rng.normal(0.0, PHASE_JITTER);
    pattern.render(amplitude, jitter, &mut img);
    if let Some(off) = extra_offset {
        for (v, o) in img.iter_mut().zip(off) {
            *v += o;
        }
    }
    img
}

fn shape() -> Vec<usize> {
    vec![IMAGE_SIDE, IMAGE_SIDE]
}

/// Ungrouped task with `per_class` items per class; a small fraction of
/// items is drawn from another class's pattern but keeps its label.
fn ungrouped(
    spec: &TaskSpec,
    patterns: &[Grating],
    per_class: usize,
    rng: &mut SeededRng,
) -> Result<LabeledDataset> {
    let c = patterns.len();
    let dim = IMAGE_SIDE * IMAGE_SIDE;
    let mut x = Vec::with_capacity(c * per_class * dim);
    let mut y = Vec::with_capacity(c * per_class);
    for _ in 0..per_class {
        for (label, _) in patterns.iter().enumerate() {
            let source = if rng.bernoulli(MISLABEL_RATE) {
                (label + 1 + rng.below(c - 1)) % c
            } else {
                label
            };
            x.extend(draw_item(&patterns[source], None, rng));
            y.push(label);
        }
    }
    LabeledDataset::new(
        &spec.name,
        Tensor::matrix(y.len(), dim, x)?,
        y,
        None,
        Split::Full,
    )
}

/// Grouped task: `groups` groups of `per_group` items, half the groups per
/// class. Each group adds its own faint offset image; a small fraction of
/// groups show the other class's pattern.
fn grouped(
    spec: &TaskSpec,
    patterns: &[Grating],
    groups: usize,
    per_group: usize,
    rng: &mut SeededRng,
) -> Result<LabeledDataset> {
    let c = patterns.len();
    let dim = IMAGE_SIDE * IMAGE_SIDE;
    let mut x = Vec::with_capacity(groups * per_group * dim);
    let mut y = Vec::with_capacity(groups * per_group);
    let mut g_ids = Vec::with_capacity(groups * per_group);
    for g in 0..groups {
        let label = g % c;
        let source = if rng.bernoulli(GROUP_MISLABEL_RATE) {
            (label + 1 + rng.below(c - 1)) % c
        } else {
            label
        };
        let offset = rng.normal_vec(dim, 0.0, 0.2);
        for _ in 0..per_group {
            x.extend(draw_item(&patterns[source], Some(&offset), rng));
            y.push(label);
            g_ids.push(g as u32);
        }
    }
    LabeledDataset::new(
        &spec.name,
        Tensor::matrix(y.len(), dim, x)?,
        y,
        Some(g_ids),
        Split::Full,
    )
}

/// The three desk-scale tasks: a grouped 2-class task (60 groups × 8), a
/// 3-class task (900 items) and a 2-class task (600 items). A pure function
/// of `seed`.
pub fn generate_tasks(seed: u64) -> Result<Vec<GeneratedTask>> {
    let root = SeededRng::new(seed);
    let b_spec = TaskSpec::new(
        "B-toy",
        &["benign breast tissue", "malignant breast tumor"],
        shape(),
        true,
    )?;
    let l_spec = TaskSpec::new(
        "L-toy",
        &[
            "lung adenocarcinoma",
            "lung squamous cell carcinoma",
            "benign lung tissue",
        ],
        shape(),
        false,
    )?;
    let m_spec = TaskSpec::new(
        "M-toy",
        &["normal colon tissue", "colon tumor"],
        shape(),
        false,
    )?;

    let b_patterns = [grating(2.0, 0.0, 0.0), grating(2.0, 90.0, 0.0)];
    let l_patterns = [
        grating(4.0, 30.0, 0.0),
        grating(4.0, 120.0, 0.0),
        grating(6.0, 60.0, 1.0),
    ];
    let m_patterns = [grating(5.0, 150.0, 1.0), grating(7.0, 45.0, 0.3)];

    let mut rng = root.fork(1);
    let b_full = grouped(&b_spec, &b_patterns, 60, 8, &mut rng)?;
    let (b_train, b_test) = split_by_group(&b_full, 0.7, &mut root.fork(2))?;

    let mut rng = root.fork(3);
    let l_full = ungrouped(&l_spec, &l_patterns, 300, &mut rng)?;
    let (l_train, l_test) = split_stratified(&l_full, 3, 0.7, &mut root.fork(4))?;

    let mut rng = root.fork(5);
    let m_full = ungrouped(&m_spec, &m_patterns, 300, &mut rng)?;
    let (m_train, m_test) = split_stratified(&m_full, 2, 0.7, &mut root.fork(6))?;

    Ok(vec![
        GeneratedTask {
            spec: b_spec,
            train: b_train,
            test: b_test,
        },
        GeneratedTask {
            spec: l_spec,
            train: l_train,
            test: l_test,
        },
        GeneratedTask {
            spec: m_spec,
            train: m_train,
            test: m_test,
        },
    ])
}

/// Partitions whole groups: about `train_fraction` of the distinct group ids
/// go to train, the rest to test. No group spans both sides.
pub fn split_by_group(
    data: &LabeledDataset,
    train_fraction: f64,
    rng: &mut SeededRng,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let groups = data
        .group_ids
        .as_ref()
        .ok_or_else(|| ForgeError::Input("dataset has no group ids".into()))?;
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(ForgeError::Parameter(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    let mut distinct: Vec<u32> = groups
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    rng.shuffle(&mut distinct);
    let n_train = if distinct.len() == 1 {
        log::warn!("single-group dataset: every item lands in one split");
        1
    } else {
        ((distinct.len() as f64 * train_fraction).round() as usize).min(distinct.len())
    };
    let train_groups: BTreeSet<u32> = distinct[..n_train].iter().copied().collect();
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for (i, g) in groups.iter().enumerate() {
        if train_groups.contains(g) {
            tr.push(i);
        } else {
            te.push(i);
        }
    }
    Ok((
        data.subset(&tr, Split::Train)?,
        data.subset(&te, Split::Test)?,
    ))
}

/// Per-class item split preserving class proportions.
pub fn split_stratified(
    data: &LabeledDataset,
    num_classes: usize,
    train_fraction: f64,
    rng: &mut SeededRng,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for mut idx in data.indices_by_class(num_classes) {
        rng.shuffle(&mut idx);
        let n_train = (idx.len() as f64 * train_fraction).round() as usize;
        tr.extend_from_slice(&idx[..n_train]);
        te.extend_from_slice(&idx[n_train..]);
    }
    tr.sort_unstable();
    te.sort_unstable();
    Ok((
        data.subset(&tr, Split::Train)?,
        data.subset(&te, Split::Test)?,
    ))
}

/// Seeded class-stratified sample of about `fraction` of the items, at least
/// one per present class.
pub fn stratified_sample(
    data: &LabeledDataset,
    num_classes: usize,
    fraction: f64,
    rng: &mut SeededRng,
) -> Result<LabeledDataset> {
    let mut picked = Vec::new();
    for idx in data.indices_by_class(num_classes) {
        if idx.is_empty() {
            continue;
        }
        let k = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len());
        picked.extend(rng.sample_indices(idx.len(), k).into_iter().map(|i| idx[i]));
    }
    picked.sort_unstable();
    data.subset(&picked, data.split)
}

/// `data/manifest.json` contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
}

/// Writes `<dir>/<task>/{train,test}.fgd` plus `<dir>/manifest.json`.
pub fn write_tasks(dir: &Path, seed: u64, tasks: &[GeneratedTask]) -> Result<()> {
    for t in tasks {
        t.train.save(&dir.join(&t.spec.name).join("train.fgd"))?;
        t.test.save(&dir.join(&t.spec.name).join("test.fgd"))?;
    }
    let manifest = DataManifest {
        seed,
        tasks: tasks.iter().map(|t| t.spec.clone()).collect(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DataManifest> {
    Ok(serde_json::from_slice(&std::fs::read(
        dir.join("manifest.json"),
    )?)?)
}

pub fn read_task(dir: &Path, spec: &TaskSpec) -> Result<GeneratedTask> {
    let train = LabeledDataset::load(&dir.join(&spec.name).join("train.fgd"))?;
    let test = LabeledDataset::load(&dir.join(&spec.name).join("test.fgd"))?;
    Ok(GeneratedTask {
        spec: spec.clone(),
        train,
        test,
    })
}

/// Per-class item counts keyed by label, for reporting.
pub fn class_histogram(spec: &TaskSpec, data: &LabeledDataset) -> BTreeMap<String, usize> {
    spec.labels
        .iter()
        .cloned()
        .zip(data.class_counts(spec.num_classes()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_pure_in_seed() {
        let a = generate_tasks(5).unwrap();
        let b = generate_tasks(5).unwrap();
        let c = generate_tasks(6).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.train.to_bytes(), y.train.to_bytes());
            assert_eq!(x.test.to_bytes(), y.test.to_bytes());
        }
        assert_ne!(a[1].train.to_bytes(), c[1].train.to_bytes());
    }

    #[test]
    fn documented_class_structure() {
        let tasks = generate_tasks(1).unwrap();
        let classes: Vec<usize> = tasks.iter().map(|t| t.spec.num_classes()).collect();
        assert_eq!(classes, vec![2, 3, 2]);

        let b = &tasks[0];
        assert_eq!(b.train.len() + b.test.len(), 480);
        let groups: BTreeSet<u32> = b
            .train
            .group_ids
            .iter()
            .chain(b.test.group_ids.iter())
            .flatten()
            .copied()
            .collect();
        assert_eq!(groups.len(), 60);

        let l = &tasks[1];
        let total: Vec<usize> = l
            .train
            .class_counts(3)
            .iter()
            .zip(l.test.class_counts(3))
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(total, vec![300, 300, 300]);
        assert_eq!(l.train.class_counts(3), vec![210, 210, 210]);

        let m = &tasks[2];
        assert_eq!(m.train.len() + m.test.len(), 600);
        assert_eq!(m.train.class_counts(2), vec![210, 210]);
        for t in &tasks {
            assert_eq!(t.spec.input_shape, vec![16, 16]);
            assert!(t.train.inputs.is_finite());
        }
    }

    #[test]
    fn group_split_partitions_groups() {
        let tasks = generate_tasks(2).unwrap();
        let b = &tasks[0];
        let tr: BTreeSet<u32> = b
            .train
            .group_ids
            .as_ref()
            .unwrap()
            .iter()
            .copied()
            .collect();
        let te: BTreeSet<u32> = b.test.group_ids.as_ref().unwrap().iter().copied().collect();
        assert!(tr.is_disjoint(&te));
        assert_eq!(tr.len(), 42);
        assert_eq!(te.len(), 18);
    }

    #[test]
    fn split_needs_groups() {
        let tasks = generate_tasks(2).unwrap();
        let err = split_by_group(&tasks[1].train, 0.7, &mut SeededRng::new(0)).unwrap_err();
        assert!(matches!(err, ForgeError::Input(_)));
    }

    #[test]
    fn single_group_lands_in_one_split() {
        let d = LabeledDataset::new(
            "t",
            Tensor::zeros(&[3, 2]),
            vec![0, 1, 0],
            Some(vec![7, 7, 7]),
            Split::Full,
        )
        .unwrap();
        let (tr, te) = split_by_group(&d, 0.7, &mut SeededRng::new(0)).unwrap();
        assert_eq!(tr.len(), 3);
        assert!(te.is_empty());
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let tasks = generate_tasks(3).unwrap();
        let bytes = tasks[0].test.to_bytes();
        let back = LabeledDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);

        let err = LabeledDataset::from_bytes(&bytes[..bytes.len() - 7]).unwrap_err();
        assert!(matches!(err, ForgeError::Format(_)));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        let err = LabeledDataset::from_bytes(&wrong_version).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn stratified_sample_keeps_every_class() {
        let tasks = generate_tasks(4).unwrap();
        let s = stratified_sample(&tasks[1].train, 3, 0.1, &mut SeededRng::new(1)).unwrap();
        assert_eq!(s.class_counts(3), vec![21, 21, 21]);
    }
}
