//! Synthetic event-frame datasets.
//!
//! Samples are `[T, 1, H, W]` tensors of `{0, 1}` frames. The moving-bar
//! tasks draw a full-height vertical bar; left- and right-moving start
//! ranges mirror each other so that reversing a right-moving sequence in
//! time gives a left-moving sequence with the same probability. Direction is
//! therefore only visible in frame order. Static shapes repeat one frame
//! `T` times.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Left, right, static.
    MovingBar,
    /// Left, right.
    MovingBarLr,
    /// Square, square with a hole in its centre, plus, cross. The two
    /// squares are the designated similar pair.
    StaticShapes,
}

impl Task {
    pub fn classes(self) -> usize {
        match self {
            Task::MovingBar => 3,
            Task::MovingBarLr => 2,
            Task::StaticShapes => 4,
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Task::MovingBar => &["left", "right", "static"],
            Task::MovingBarLr => &["left", "right"],
            Task::StaticShapes => &["square", "holed-square", "plus", "cross"],
        }
    }

    pub fn similar_pairs(self) -> Vec<(usize, usize)> {
        match self {
            Task::StaticShapes => vec![(0, 1)],
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Db,
    Query,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Db, Split::Query];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Db => "db",
            Split::Query => "query",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7452_4149_4e00_0001,
            Split::Db => 0x4442_0000_0000_0002,
            Split::Query => 0x5155_4552_5900_0003,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub task: Task,
    pub seed: u64,
    pub time_steps: usize,
    pub height: usize,
    pub width: usize,
    pub train: usize,
    pub db: usize,
    pub query: usize,
    pub bar_width: usize,
    /// Pixels per time step.
    pub speed: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: Task::MovingBar,
            seed: 0,
            time_steps: 8,
            height: 32,
            width: 32,
            train: 300,
            db: 120,
            query: 30,
            bar_width: 4,
            speed: 2,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.task.classes();
        if self.time_steps < 2 {
            return Err(Error::Config(format!("need at least 2 time steps, got {}", self.time_steps)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("frame size must be positive".into()));
        }
        for (split, n) in [("train", self.train), ("db", self.db), ("query", self.query)] {
            if n < k {
                return Err(Error::Config(format!("{split} split of {n} is smaller than {k} classes")));
            }
        }
        match self.task {
            Task::MovingBar | Task::MovingBarLr => {
                let travel = self.speed * (self.time_steps - 1);
                if self.bar_width == 0 || self.bar_width + travel > self.width {
                    return Err(Error::Config(format!(
                        "a {}-pixel bar moving {} pixels does not fit a width of {}",
                        self.bar_width, travel, self.width
                    )));
                }
            }
            Task::StaticShapes => {
                if self.height < 7 || self.width < 7 {
                    return Err(Error::Config(format!("shapes need at least 7×7 frames, got {}×{}", self.height, self.width)));
                }
            }
        }
        Ok(())
    }

    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Db => self.db,
            Split::Query => self.query,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub time_steps: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Tensor>,
    pub labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    task: Task,
    classes: usize,
    class_names: Vec<String>,
    similar_pairs: Vec<(usize, usize)>,
    time_steps: usize,
    height: usize,
    width: usize,
    count: usize,
    labels: Vec<usize>,
    blob: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.task.classes()
    }

    /// `<dir>/<split>.json` and `<dir>/<split>.bin`, one byte per pixel.
    pub fn save(&self, dir: &Path, split: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let blob_name = format!("{split}.bin");
        let mut blob = Vec::with_capacity(self.len() * self.time_steps * self.height * self.width);
        for s in &self.samples {
            blob.extend(s.data().iter().map(|&v| v as u8));
        }
        let index = DatasetIndex {
            task: self.task,
            classes: self.classes(),
            class_names: self.task.class_names().iter().map(|s| s.to_string()).collect(),
            similar_pairs: self.task.similar_pairs(),
            time_steps: self.time_steps,
            height: self.height,
            width: self.width,
            count: self.len(),
            labels: self.labels.clone(),
            blob: blob_name.clone(),
        };
        fs::write(dir.join(&blob_name), blob)?;
        let mut json = serde_json::to_vec_pretty(&index)?;
        json.push(b'\n');
        fs::write(dir.join(format!("{split}.json")), json)?;
        Ok(())
    }

    pub fn load(dir: &Path, split: &str) -> Result<Self> {
        let index: DatasetIndex = serde_json::from_slice(&fs::read(dir.join(format!("{split}.json")))?)?;
        let blob = fs::read(dir.join(&index.blob))?;
        let frame = index.time_steps * index.height * index.width;
        if blob.len() != frame * index.count || index.labels.len() != index.count {
            return Err(Error::Format(format!("{split}: blob or labels do not match {} samples", index.count)));
        }
        if blob.iter().any(|&b| b > 1) || index.labels.iter().any(|&l| l >= index.task.classes()) {
            return Err(Error::Format(format!("{split}: pixel or label out of range")));
        }
        let samples = blob
            .chunks(frame.max(1))
            .take(index.count)
            .map(|c| Tensor::new(vec![index.time_steps, 1, index.height, index.width], c.iter().map(|&b| f32::from(b)).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            task: index.task,
            time_steps: index.time_steps,
            height: index.height,
            width: index.width,
            samples,
            labels: index.labels,
        })
    }
}

/// Class-balanced split: labels cycle through the classes, then the order
/// is shuffled.
pub fn generate(config: &DataConfig, split: Split) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ split.salt());
    let k = config.task.classes();
    let mut labels: Vec<usize> = (0..config.count(split)).map(|i| i % k).collect();
    labels.shuffle(&mut rng);
    let samples = labels.iter().map(|&y| sample(config, y, &mut rng)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        task: config.task,
        time_steps: config.time_steps,
        height: config.height,
        width: config.width,
        samples,
        labels,
    })
}

pub fn generate_all(config: &DataConfig) -> Result<[Dataset; 3]> {
    Ok([generate(config, Split::Train)?, generate(config, Split::Db)?, generate(config, Split::Query)?])
}

fn sample(c: &DataConfig, label: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (t, h, w) = (c.time_steps, c.height, c.width);
    let mut data = vec![0.0f32; t * h * w];
    match c.task {
        Task::MovingBar | Task::MovingBarLr => {
            let travel = c.speed * (t - 1);
            let xs: Vec<usize> = match label {
                0 => {
                    let x0 = rng.gen_range(travel..=w - c.bar_width);
                    (0..t).map(|i| x0 - c.speed * i).collect()
                }
                1 => {
                    let x0 = rng.gen_range(0..=w - c.bar_width - travel);
                    (0..t).map(|i| x0 + c.speed * i).collect()
                }
                _ => vec![rng.gen_range(0..=w - c.bar_width); t],
            };
            for (i, &x) in xs.iter().enumerate() {
                for y in 0..h {
                    let row = (i * h + y) * w;
                    data[row + x..row + x + c.bar_width].fill(1.0);
                }
            }
        }
        Task::StaticShapes => {
            let frame = shape_frame(label, h, w, rng);
            for i in 0..t {
                data[i * h * w..(i + 1) * h * w].copy_from_slice(&frame);
            }
        }
    }
    Tensor::new(vec![t, 1, h, w], data)
}

fn shape_frame(label: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let max = h.min(w).min(13);
    let size = rng.gen_range(7..=max) | 1;
    let size = size.min(max);
    let top = rng.gen_range(0..=h - size);
    let left = rng.gen_range(0..=w - size);
    let mid = size / 2;
    let mut f = vec![0.0f32; h * w];
    for dy in 0..size {
        for dx in 0..size {
            let on = match label {
                0 => true,
                1 => dy.abs_diff(mid) > 1 || dx.abs_diff(mid) > 1,
                2 => dy.abs_diff(mid) <= 1 || dx.abs_diff(mid) <= 1,
                _ => dy.abs_diff(dx) <= 1 || (dy + dx).abs_diff(size - 1) <= 1,
            };
            if on {
                f[(top + dy) * w + left + dx] = 1.0;
            }
        }
    }
    f
}
