//! Procedural desk-scale dataset and its on-disk index.
//!
//! Layout under the root directory:
//!
//! ```text
//! clear/<id>.png  hazy/<id>.png  trans/<id>.png  (16-bit grey)
//! index.tsv       id, clear_path, hazy_path, trans_path, split
//! meta.tsv        id, beta, airlight, seed
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::haze::{generate_transmission, synthesize_haze};
use crate::image::{load_image, load_transmission, save_image, save_transmission, ImageRGB, TransmissionMap};

pub const BETA_RANGE: (f32, f32) = (0.6, 1.8);
pub const AIRLIGHT_RANGE: (f32, f32) = (0.7, 1.0);
pub const MIN_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CoreError::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HazePair {
    pub id: String,
    pub clear: ImageRGB,
    pub hazy: ImageRGB,
    pub t: TransmissionMap,
    pub airlight: f32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub id: String,
    /// Paths are relative to the dataset root.
    pub clear: PathBuf,
    pub hazy: PathBuf,
    pub trans: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<IndexEntry>,
}

/// A clear/hazy pair loaded for training or evaluation.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub clear: ImageRGB,
    pub hazy: ImageRGB,
}

pub const INDEX_HEADER: &str = "id\tclear_path\thazy_path\ttrans_path\tsplit";

/// Sizes of the (train, val, test) splits: 10% each for validation and test,
/// rounded to nearest, the rest for training.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let held = (n + 5) / 10;
    (n - 2 * held, held, held)
}

impl DatasetIndex {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join("index.tsv");
        let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(INDEX_HEADER) {
            return Err(CoreError::format(&path, format!("header must be {INDEX_HEADER:?}")));
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, clear, hazy, trans, split] = cols[..] else {
                return Err(CoreError::format(&path, format!("line {} has {} columns", n + 2, cols.len())));
            };
            entries.push(IndexEntry {
                id: id.to_string(),
                clear: clear.into(),
                hazy: hazy.into(),
                trans: (!trans.is_empty()).then(|| trans.into()),
                split: split.parse()?,
            });
        }
        let index = Self { root, entries };
        index.check_unique_ids()?;
        Ok(index)
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.id) {
                return Err(CoreError::Config(format!("id {} appears more than once", e.id)));
            }
        }
        Ok(())
    }

    pub fn save(&self) -> Result<()> {
        let mut out = String::from(INDEX_HEADER);
        out.push('\n');
        for e in &self.entries {
            let trans = e.trans.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.clear.display(),
                e.hazy.display(),
                trans,
                e.split
            ));
        }
        let path = self.root.join("index.tsv");
        fs::write(&path, out).map_err(|e| CoreError::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn load_samples(&self, split: Split) -> Result<Vec<Sample>> {
        self.split(split)
            .map(|e| {
                Ok(Sample {
                    id: e.id.clone(),
                    clear: load_image(self.root.join(&e.clear))?,
                    hazy: load_image(self.root.join(&e.hazy))?,
                })
            })
            .collect()
    }

    /// Loads a full pair including transmission and atmospheric light, which
    /// needs `trans_path` and a `meta.tsv` row.
    pub fn load_pair(&self, entry: &IndexEntry) -> Result<HazePair> {
        let trans = entry
            .trans
            .as_ref()
            .ok_or_else(|| CoreError::Config(format!("{} has no transmission map", entry.id)))?;
        let airlight = self
            .airlights()?
            .into_iter()
            .find(|(id, _)| *id == entry.id)
            .map(|(_, a)| a)
            .ok_or_else(|| CoreError::Config(format!("{} has no meta.tsv row", entry.id)))?;
        Ok(HazePair {
            id: entry.id.clone(),
            clear: load_image(self.root.join(&entry.clear))?,
            hazy: load_image(self.root.join(&entry.hazy))?,
            t: load_transmission(self.root.join(trans))?,
            airlight,
        })
    }

    fn airlights(&self) -> Result<Vec<(String, f32)>> {
        let path = self.root.join("meta.tsv");
        let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        text.lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let cols: Vec<&str> = l.split('\t').collect();
                let a = cols
                    .get(2)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| CoreError::format(&path, format!("bad row {l:?}")))?;
                Ok((cols[0].to_string(), a))
            })
            .collect()
    }
}

fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn random_colour(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// A clear scene: a bilinear colour gradient with a few soft-edged
/// rectangles and disks on top.
pub fn procedural_clear(width: usize, height: usize, seed: u64) -> Result<ImageRGB> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corners = [(); 4].map(|_| random_colour(&mut rng));
    enum Shape {
        Rect { cx: f32, cy: f32, hw: f32, hh: f32 },
        Disk { cx: f32, cy: f32, r: f32 },
    }
    let n_shapes = rng.random_range(3..=6);
    let (wf, hf) = (width as f32, height as f32);
    let shapes: Vec<(Shape, [f32; 3], f32)> = (0..n_shapes)
        .map(|_| {
            let cx = rng.random_range(0.0..wf);
            let cy = rng.random_range(0.0..hf);
            let scale = wf.min(hf);
            let shape = if rng.random_bool(0.5) {
                Shape::Rect {
                    cx,
                    cy,
                    hw: rng.random_range(0.08..0.3) * scale,
                    hh: rng.random_range(0.08..0.3) * scale,
                }
            } else {
                Shape::Disk {
                    cx,
                    cy,
                    r: rng.random_range(0.08..0.3) * scale,
                }
            };
            (shape, random_colour(&mut rng), rng.random_range(0.6..1.0))
        })
        .collect();
    ImageRGB::from_fn(width, height, |y, x| {
        let u = x as f32 / (wf - 1.0).max(1.0);
        let v = y as f32 / (hf - 1.0).max(1.0);
        let mut px = [0.0f32; 3];
        for (c, p) in px.iter_mut().enumerate() {
            let top = corners[0][c] * (1.0 - u) + corners[1][c] * u;
            let bottom = corners[2][c] * (1.0 - u) + corners[3][c] * u;
            *p = top * (1.0 - v) + bottom * v;
        }
        let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
        for (shape, colour, opacity) in &shapes {
            // Signed distance to the boundary, negative inside.
            let sd = match *shape {
                Shape::Rect { cx, cy, hw, hh } => ((xf - cx).abs() - hw).max((yf - cy).abs() - hh),
                Shape::Disk { cx, cy, r } => ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt() - r,
            };
            let alpha = opacity * (1.0 - smoothstep(-1.5, 1.5, sd));
            for c in 0..3 {
                px[c] = px[c] * (1.0 - alpha) + colour[c] * alpha;
            }
        }
        px
    })
}

/// A hazy pair whose stored images are exactly what a reload yields: the
/// clear image is quantised to 8 bits and `t` to 16 bits before hazing.
pub fn synthesize_pair(id: &str, width: usize, height: usize, seed: u64) -> Result<HazePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clear = procedural_clear(width, height, rng.random())?.quantize8();
    let beta = rng.random_range(BETA_RANGE.0..=BETA_RANGE.1);
    let airlight = rng.random_range(AIRLIGHT_RANGE.0..=AIRLIGHT_RANGE.1);
    let t = generate_transmission(width, height, beta, rng.random())?;
    let t = TransmissionMap::new(
        width,
        height,
        t.values()
            .iter()
            .map(|v| ((v * 65535.0).round() / 65535.0).max(1.0 / 65535.0))
            .collect(),
    )?;
    let hazy = synthesize_haze(&clear, &t, airlight)?;
    Ok(HazePair {
        id: id.to_string(),
        clear,
        hazy,
        t,
        airlight,
    })
}

/// Writes `n` synthetic pairs under `root` and returns the saved index.
pub fn build_desk_dataset(root: impl AsRef<Path>, n: usize, width: usize, height: usize, seed: u64) -> Result<DatasetIndex> {
    let root = root.as_ref().to_path_buf();
    if width < MIN_SIZE || height < MIN_SIZE {
        return Err(CoreError::Config(format!(
            "desk images must be at least {MIN_SIZE}×{MIN_SIZE}, got {height}×{width}"
        )));
    }
    if n == 0 {
        return Err(CoreError::Config("dataset needs at least one image".into()));
    }
    for dir in ["clear", "hazy", "trans"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| CoreError::io(d, e))?;
    }
    let (n_train, n_val, _) = split_sizes(n);
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n);
    let mut meta = String::from("id\tbeta\tairlight\tseed\n");
    for i in 0..n {
        let id = format!("{i:05}");
        let pair_seed: u64 = master.random();
        let pair = synthesize_pair(&id, width, height, pair_seed)?;
        let entry = IndexEntry {
            clear: PathBuf::from("clear").join(format!("{id}.png")),
            hazy: PathBuf::from("hazy").join(format!("{id}.png")),
            trans: Some(PathBuf::from("trans").join(format!("{id}.png"))),
            split: if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            },
            id,
        };
        save_image(&pair.clear, root.join(&entry.clear))?;
        save_image(&pair.hazy, root.join(&entry.hazy))?;
        save_transmission(&pair.t, root.join(entry.trans.as_ref().expect("set above")))?;
        let beta = -pair.t.values().iter().copied().fold(1.0f32, f32::min).ln();
        meta.push_str(&format!("{}\t{beta:.6}\t{:.9}\t{pair_seed}\n", entry.id, pair.airlight));
        entries.push(entry);
    }
    let meta_path = root.join("meta.tsv");
    fs::write(&meta_path, meta).map_err(|e| CoreError::io(meta_path, e))?;
    let index = DatasetIndex { root, entries };
    index.save()?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_sizes(10), (8, 1, 1));
        assert_eq!(split_sizes(200), (160, 20, 20));
        assert_eq!(split_sizes(4), (4, 0, 0));
    }

    #[test]
    fn split_names_roundtrip() {
        for s in [Split::Train, Split::Val, Split::Test] {
            assert_eq!(s.to_string().parse::<Split>().unwrap(), s);
        }
        assert!("dev".parse::<Split>().is_err());
    }

    #[test]
    fn procedural_images_are_seeded() {
        let a = procedural_clear(40, 32, 5).unwrap();
        assert_eq!(a, procedural_clear(40, 32, 5).unwrap());
        assert_ne!(a, procedural_clear(40, 32, 6).unwrap());
    }
}
