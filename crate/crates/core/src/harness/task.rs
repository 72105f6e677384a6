//! Synthetic planted-evidence task.
//!
//! A fixed "world" drawn from `world_seed` supplies mutually orthonormal
//! directions: a marker, one direction per class and the prompt embeddings.
//! Each sample's visual span holds `visual_count` rows. Every planted row
//! carries the marker (scaled by `planted_scale`) and is immediately preceded
//! by a carrier row holding the sample's class; the model has to bind the
//! two before the class can be read off the planted rows. As many lure rows
//! carry half the marker behind a carrier of one shared wrong class. All
//! other rows hold a decoy class, assigned so that every class occurs about
//! equally often across the span, which leaves class frequency
//! uninformative. The answer is read at the last prompt position; the
//! prompt itself is a fixed token sequence.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenSequence;
use crate::tensor::{dot, Matrix};

/// Class weight in carrier and decoy rows, relative to `distractor_scale`.
const CLASS_WEIGHT: f64 = 1.0;
/// Marker weight on lure rows.
const LURE_MARKER: f64 = 0.5;
/// Noise norm relative to `distractor_scale`.
const NOISE: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub hidden: usize,
    pub visual_count: usize,
    pub planted_count: usize,
    pub class_count: usize,
    pub text_len: usize,
    pub samples: usize,
    pub distractor_scale: f64,
    pub planted_scale: f64,
    /// Weight of the faint class echo on planted rows.
    pub echo: f64,
    /// Lure pairs per sample; clamped to the room left by the planted pairs.
    pub lure_count: usize,
    pub world_seed: u64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            hidden: 64,
            visual_count: 64,
            planted_count: 4,
            class_count: 5,
            text_len: 4,
            samples: 200,
            distractor_scale: 1.0,
            planted_scale: 1.5,
            echo: 0.1,
            lure_count: 8,
            world_seed: 7,
            seed: 1,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self, vocab: Option<usize>) -> Result<()> {
        if 2 * self.planted_count > self.visual_count {
            return Err(Error::config(format!(
                "{} planted rows and their carriers do not fit in {} visual rows",
                self.planted_count, self.visual_count
            )));
        }
        if self.class_count < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if let Some(v) = vocab {
            if self.class_count > v {
                return Err(Error::config(format!(
                    "class_count {} exceeds vocabulary {v}",
                    self.class_count
                )));
            }
        }
        if self.text_len == 0 {
            return Err(Error::config("text_len must be at least 1"));
        }
        if World::directions(self) > self.hidden {
            return Err(Error::config(format!(
                "hidden size {} is below the {} orthonormal directions the task needs",
                self.hidden,
                World::directions(self)
            )));
        }
        if !(self.distractor_scale > 0.0 && self.planted_scale > 0.0)
            || !(self.distractor_scale.is_finite() && self.planted_scale.is_finite())
        {
            return Err(Error::config("scales must be positive and finite"));
        }
        if !(self.echo.is_finite() && self.echo >= 0.0) {
            return Err(Error::config("echo must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.visual_count + self.text_len
    }

}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seq: TokenSequence,
    pub label: usize,
    /// Visual indices of the planted rows, ascending.
    pub planted: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// SplitMix64 finalizer; derives independent per-item seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct World {
    marker: Vec<f64>,
    classes: Vec<Vec<f64>>,
    prompt: Vec<Vec<f64>>,
}

fn gaussian_vec(d: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

impl World {
    fn directions(spec: &TaskSpec) -> usize {
        1 + spec.class_count + spec.text_len
    }

    fn new(spec: &TaskSpec) -> World {
        let d = spec.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.world_seed);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < World::directions(spec) {
            let mut v = gaussian_vec(d, 1.0, &mut rng);
            for b in &basis {
                let p = dot(&v, b);
                axpy(&mut v, -p, b);
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
        }
        let mut it = basis.into_iter();
        let mut take = |k: usize| it.by_ref().take(k).collect::<Vec<_>>();
        World {
            marker: take(1).pop().expect("marker direction"),
            classes: take(spec.class_count),
            prompt: take(spec.text_len),
        }
    }
}

fn sample_one(spec: &TaskSpec, world: &World, index: usize) -> Result<Sample> {
    #[derive(Clone, Copy)]
    enum Unit {
        Planted,
        Lure,
        Single,
    }
    let d = spec.hidden;
    let classes = spec.class_count;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, index as u64));
    let label = rng.random_range(0..classes);
    let lure = (label + rng.random_range(1..classes)) % classes;
    let planted_n = spec.planted_count;
    let lure_n = spec.lure_count.min(spec.visual_count / 2 - planted_n);
    let singles = spec.visual_count - 2 * (planted_n + lure_n);

    let mut units = vec![Unit::Planted; planted_n];
    units.extend(std::iter::repeat_n(Unit::Lure, lure_n));
    units.extend(std::iter::repeat_n(Unit::Single, singles));
    units.shuffle(&mut rng);

    // Decoy classes top up whichever class is rarest so far, ties broken by
    // a random ranking.
    let mut counts = vec![0usize; classes];
    counts[label] += planted_n;
    counts[lure] += lure_n;
    let mut rank: Vec<usize> = (0..classes).collect();
    rank.shuffle(&mut rng);
    let mut decoys = Vec::with_capacity(singles);
    for _ in 0..singles {
        let c = *rank.iter().min_by_key(|&&c| counts[c]).expect("at least two classes");
        counts[c] += 1;
        decoys.push(c);
    }
    decoys.shuffle(&mut rng);

    let noise_std = NOISE * spec.distractor_scale / (d as f64).sqrt();
    let class_row = |c: usize, rng: &mut ChaCha8Rng| {
        let mut v = gaussian_vec(d, noise_std, rng);
        axpy(&mut v, CLASS_WEIGHT * spec.distractor_scale, &world.classes[c]);
        v
    };
    let mut e = Matrix::zeros(spec.seq_len(), d);
    let mut planted = Vec::with_capacity(planted_n);
    let mut row = 0;
    let mut decoy = decoys.into_iter();
    for unit in units {
        match unit {
            Unit::Planted => {
                e.row_mut(row).copy_from_slice(&class_row(label, &mut rng));
                let mut v = gaussian_vec(d, noise_std, &mut rng);
                axpy(&mut v, spec.distractor_scale, &world.marker);
                axpy(&mut v, spec.echo * spec.distractor_scale, &world.classes[label]);
                v.iter_mut().for_each(|x| *x *= spec.planted_scale);
                e.row_mut(row + 1).copy_from_slice(&v);
                planted.push(row + 1);
                row += 2;
            }
            Unit::Lure => {
                e.row_mut(row).copy_from_slice(&class_row(lure, &mut rng));
                let mut v = gaussian_vec(d, noise_std, &mut rng);
                axpy(&mut v, LURE_MARKER * spec.distractor_scale, &world.marker);
                e.row_mut(row + 1).copy_from_slice(&v);
                row += 2;
            }
            Unit::Single => {
                let c = decoy.next().expect("one decoy per single row");
                e.row_mut(row).copy_from_slice(&class_row(c, &mut rng));
                row += 1;
            }
        }
    }
    for (t, p) in world.prompt.iter().enumerate() {
        e.row_mut(spec.visual_count + t).copy_from_slice(p);
    }
    Ok(Sample {
        seq: TokenSequence::with_layout(e, spec.visual_count)?,
        label,
        planted,
    })
}

pub fn generate_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate(None)?;
    let world = World::new(spec);
    let samples = (0..spec.samples)
        .map(|i| sample_one(spec, &world, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}
