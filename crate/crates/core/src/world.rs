//! Synthetic action-detection world.
//!
//! Every instance is a sum of latent attribute prototypes plus Gaussian
//! noise. Prototypes are orthonormal directions drawn once per world. Each
//! person in a clip is a target with four binary labels, one per
//! interaction mechanism:
//!
//! | class | active iff |
//! |-------|------------|
//! | 0 pose | the target's own pose is "sitting" |
//! | 1 person interaction | some *other* person in the clip is speaking |
//! | 2 object interaction | some object in the clip is a cup |
//! | 3 temporal | the *same* person was "open" in one of the previous `max_lag` clips |
//!
//! A video has a fixed cast, so persons keep their identity prototype across
//! clips; each clip also carries a sinusoidal clip-position code.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["pose", "person", "object", "temporal"];
const OBJECT_TYPES: usize = 3;
const CUP: usize = 0;
/// Clip positions are encoded by sinusoids of periods 4, 8 and 16 clips.
const TIME_PERIODS: [f64; 3] = [4.0, 8.0, 16.0];

/// Latent event rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rates {
    pub sitting: f64,
    pub speaking: f64,
    pub open: f64,
    pub cup: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Self {
            sitting: 0.5,
            speaking: 0.2,
            open: 0.2,
            cup: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    /// Clips per video (T).
    pub clips_per_video: usize,
    pub videos: usize,
    /// The last `eval_videos` videos form the held-out split.
    pub eval_videos: usize,
    pub persons_per_clip: usize,
    pub objects_per_clip: usize,
    /// Size of the identity prototype pool each video's cast is drawn from.
    pub identities: usize,
    pub d_in: usize,
    pub noise_sigma: f64,
    /// Temporal labels look back over clips `t−max_lag ..= t−1`.
    pub max_lag: usize,
    #[serde(default)]
    pub rates: Rates,
    #[serde(default)]
    pub seed: u64,
}

impl WorldConfig {
    /// A small noiseless world.
    pub fn tiny(seed: u64) -> Self {
        Self {
            clips_per_video: 8,
            videos: 24,
            eval_videos: 6,
            persons_per_clip: 3,
            objects_per_clip: 2,
            identities: 6,
            d_in: 32,
            noise_sigma: 0.0,
            max_lag: 2,
            rates: Rates::default(),
            seed,
        }
    }

    /// The noiseless world the ablation experiments run on.
    pub fn desk(seed: u64) -> Self {
        Self {
            clips_per_video: 12,
            videos: 100,
            eval_videos: 10,
            d_in: 32,
            ..Self::tiny(seed)
        }
    }

    /// Number of prototype directions the world needs.
    pub fn prototype_count(&self) -> usize {
        // person/object markers, 2 poses, 2 roles, 2 states, object types, identities, time
        2 + 2 + 2 + 2 + OBJECT_TYPES + self.identities + 2 * TIME_PERIODS.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.eval_videos > self.videos {
            return bad(format!("eval_videos {} exceeds videos {}", self.eval_videos, self.videos));
        }
        if self.clips_per_video == 0 {
            return bad("clips_per_video must be positive".into());
        }
        if self.identities < self.persons_per_clip {
            return bad(format!(
                "identities {} cannot cover {} persons per clip",
                self.identities, self.persons_per_clip
            ));
        }
        if self.d_in < self.prototype_count() {
            return bad(format!(
                "d_in {} is smaller than the {} prototypes this world needs",
                self.d_in,
                self.prototype_count()
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        for (name, p) in [
            ("sitting", self.rates.sitting),
            ("speaking", self.rates.speaking),
            ("open", self.rates.open),
            ("cup", self.rates.cup),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("rate {name} = {p} is not a probability"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonLatent {
    pub identity: usize,
    pub sitting: bool,
    pub speaking: bool,
    pub open: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipLatents {
    pub persons: Vec<PersonLatent>,
    /// Object type indices; 0 is the cup.
    pub objects: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample<T> {
    pub video: u64,
    /// 1-based.
    pub clip: u64,
    /// `[n_persons, d_in]`
    pub persons: Tensor<T>,
    /// `[n_objects, d_in]`
    pub objects: Tensor<T>,
    /// `[n_persons, 4]` binary.
    pub labels: Tensor<T>,
    pub latents: ClipLatents,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video<T> {
    pub id: u64,
    pub clips: Vec<ClipSample<T>>,
}

impl<T> Video<T> {
    pub fn len(&self) -> u64 {
        self.clips.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub config: WorldConfig,
    pub videos: Vec<Video<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn train_videos(&self) -> &[Video<T>] {
        let n = self.videos.len().saturating_sub(self.config.eval_videos);
        &self.videos[..n]
    }

    pub fn eval_videos(&self) -> &[Video<T>] {
        let n = self.videos.len().saturating_sub(self.config.eval_videos);
        &self.videos[n..]
    }

    pub fn video(&self, id: u64) -> Option<&Video<T>> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn clip_count(&self) -> usize {
        self.videos.iter().map(|v| v.clips.len()).sum()
    }
}

/// Orthonormal prototype directions, indexed by role.
#[derive(Debug, Clone)]
struct Prototypes {
    rows: Vec<Vec<f64>>,
    identities: usize,
}

impl Prototypes {
    fn draw(config: &WorldConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = config.prototype_count();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        while rows.len() < n {
            let mut v: Vec<f64> = (0..config.d_in).map(|_| StandardNormal.sample(rng)).collect();
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(r) {
                    *x -= dot * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                rows.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        Self {
            rows,
            identities: config.identities,
        }
    }

    fn person_marker(&self) -> &[f64] {
        &self.rows[0]
    }
    fn object_marker(&self) -> &[f64] {
        &self.rows[1]
    }
    fn pose(&self, sitting: bool) -> &[f64] {
        &self.rows[2 + sitting as usize]
    }
    fn role(&self, speaking: bool) -> &[f64] {
        &self.rows[4 + speaking as usize]
    }
    fn state(&self, open: bool) -> &[f64] {
        &self.rows[6 + open as usize]
    }
    fn object(&self, kind: usize) -> &[f64] {
        &self.rows[8 + kind]
    }
    fn identity(&self, id: usize) -> &[f64] {
        &self.rows[8 + OBJECT_TYPES + id]
    }
    /// Unit-norm position code of clip `t`: a cos/sin pair per period.
    fn clip(&self, t: u64) -> Vec<f64> {
        let base = 8 + OBJECT_TYPES + self.identities;
        let scale = (TIME_PERIODS.len() as f64).sqrt().recip();
        let mut code = vec![0.0; self.rows[0].len()];
        for (f, period) in TIME_PERIODS.iter().enumerate() {
            let angle = std::f64::consts::TAU * t as f64 / period;
            let (c, s) = (&self.rows[base + 2 * f], &self.rows[base + 2 * f + 1]);
            for (j, x) in code.iter_mut().enumerate() {
                *x += scale * (angle.cos() * c[j] + angle.sin() * s[j]);
            }
        }
        code
    }
}

fn instance<T: Scalar>(parts: &[&[f64]], sigma: f64, rng: &mut ChaCha8Rng, out: &mut Vec<T>) {
    let d = parts[0].len();
    for j in 0..d {
        let mut x: f64 = parts.iter().map(|p| p[j]).sum();
        if sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            x += sigma * z;
        }
        out.push(T::lit(x));
    }
}

/// Labels of clip `t` (1-based) from the latents of its whole video.
pub fn labels_from_latents(video: &[ClipLatents], t: usize, max_lag: usize) -> Vec<[bool; NUM_CLASSES]> {
    let clip = &video[t - 1];
    let has_cup = clip.objects.contains(&CUP);
    clip.persons
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let other_speaks = clip.persons.iter().enumerate().any(|(j, q)| j != i && q.speaking);
            let was_open = (t.saturating_sub(max_lag).max(1)..t).any(|past| {
                video[past - 1]
                    .persons
                    .iter()
                    .any(|q| q.identity == p.identity && q.open)
            });
            [p.sitting, other_speaks, has_cup, was_open]
        })
        .collect()
}

fn video_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates the full dataset; identical configs give identical datasets.
pub fn generate_dataset<T: Scalar>(config: &WorldConfig) -> Result<Dataset<T>> {
    config.validate()?;
    let protos = Prototypes::draw(config, &mut video_rng(config.seed, 0));
    let videos = (0..config.videos as u64)
        .map(|v| generate_video(config, &protos, v))
        .collect();
    Ok(Dataset {
        config: config.clone(),
        videos,
    })
}

fn generate_video<T: Scalar>(config: &WorldConfig, protos: &Prototypes, id: u64) -> Video<T> {
    let mut rng = video_rng(config.seed, id + 1);
    let rates = config.rates;
    let mut cast: Vec<usize> = (0..config.identities).collect();
    cast.shuffle(&mut rng);
    cast.truncate(config.persons_per_clip);

    let latents: Vec<ClipLatents> = (0..config.clips_per_video)
        .map(|_| ClipLatents {
            persons: cast
                .iter()
                .map(|&identity| PersonLatent {
                    identity,
                    sitting: rng.gen_bool(rates.sitting),
                    speaking: rng.gen_bool(rates.speaking),
                    open: rng.gen_bool(rates.open),
                })
                .collect(),
            objects: (0..config.objects_per_clip)
                .map(|_| {
                    if rng.gen_bool(rates.cup) {
                        CUP
                    } else {
                        rng.gen_range(1..OBJECT_TYPES)
                    }
                })
                .collect(),
        })
        .collect();

    let d = config.d_in;
    let clips = latents
        .iter()
        .enumerate()
        .map(|(k, lat)| {
            let t = k as u64 + 1;
            let time = protos.clip(t);
            let mut persons = Vec::with_capacity(lat.persons.len() * d);
            for p in &lat.persons {
                let parts = [
                    protos.person_marker(),
                    protos.pose(p.sitting),
                    protos.role(p.speaking),
                    protos.state(p.open),
                    protos.identity(p.identity),
                    &time,
                ];
                instance(&parts, config.noise_sigma, &mut rng, &mut persons);
            }
            let mut objects = Vec::with_capacity(lat.objects.len() * d);
            for &o in &lat.objects {
                instance(&[protos.object_marker(), protos.object(o)], config.noise_sigma, &mut rng, &mut objects);
            }
            let labels: Vec<T> = labels_from_latents(&latents, k + 1, config.max_lag)
                .into_iter()
                .flat_map(|row| row.map(|b| if b { T::one() } else { T::zero() }))
                .collect();
            ClipSample {
                video: id,
                clip: t,
                persons: Tensor::new(vec![lat.persons.len(), d], persons).expect("n_p·d_in"),
                objects: Tensor::new(vec![lat.objects.len(), d], objects).expect("n_o·d_in"),
                labels: Tensor::new(vec![lat.persons.len(), NUM_CLASSES], labels).expect("n_p·C"),
                latents: lat.clone(),
            }
        })
        .collect();
    Video { id, clips }
}

const DATA_MAGIC: &str = "AIA-DATA 1";

impl<T: Scalar> Dataset<T> {
    /// Writes a text header, the world config as one JSON line, then one
    /// little-endian record per clip.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let json = serde_json::to_string(&self.config).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(w, "{DATA_MAGIC} clips={}", self.clip_count()).map_err(io)?;
        writeln!(w, "{json}").map_err(io)?;
        for clip in self.videos.iter().flat_map(|v| &v.clips) {
            w.write_u64::<LittleEndian>(clip.video).map_err(io)?;
            w.write_u64::<LittleEndian>(clip.clip).map_err(io)?;
            w.write_u32::<LittleEndian>(clip.latents.persons.len() as u32).map_err(io)?;
            w.write_u32::<LittleEndian>(clip.latents.objects.len() as u32).map_err(io)?;
            for p in &clip.latents.persons {
                w.write_u32::<LittleEndian>(p.identity as u32).map_err(io)?;
                w.write_all(&[p.sitting as u8, p.speaking as u8, p.open as u8]).map_err(io)?;
            }
            for &o in &clip.latents.objects {
                w.write_u32::<LittleEndian>(o as u32).map_err(io)?;
            }
            for &x in clip.persons.data().iter().chain(clip.objects.data()).chain(clip.labels.data()) {
                w.write_f64::<LittleEndian>(x.to_f64_lossy()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let count: usize = line
            .trim_end()
            .strip_prefix(DATA_MAGIC)
            .and_then(|rest| rest.trim().strip_prefix("clips="))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::format(path, "not a dataset file"))?;
        line.clear();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let config: WorldConfig = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("world config: {e}")))?;

        let bad = |_| Error::format(path, "truncated record");
        let flag = |b: u8| match b {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::format(path, format!("bad flag byte {b}"))),
        };
        let d = config.d_in;
        let mut videos: Vec<Video<T>> = Vec::new();
        for _ in 0..count {
            let video = r.read_u64::<LittleEndian>().map_err(bad)?;
            let clip = r.read_u64::<LittleEndian>().map_err(bad)?;
            let np = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
            let no = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
            let mut persons = Vec::with_capacity(np);
            for _ in 0..np {
                let identity = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
                let mut f = [0u8; 3];
                r.read_exact(&mut f).map_err(bad)?;
                persons.push(PersonLatent {
                    identity,
                    sitting: flag(f[0])?,
                    speaking: flag(f[1])?,
                    open: flag(f[2])?,
                });
            }
            let objects = (0..no)
                .map(|_| r.read_u32::<LittleEndian>().map(|o| o as usize).map_err(bad))
                .collect::<Result<Vec<_>>>()?;
            let mut floats = |n: usize| -> Result<Vec<T>> {
                (0..n).map(|_| r.read_f64::<LittleEndian>().map(T::lit).map_err(bad)).collect()
            };
            let sample = ClipSample {
                video,
                clip,
                persons: Tensor::new(vec![np, d], floats(np * d)?)?,
                objects: Tensor::new(vec![no, d], floats(no * d)?)?,
                labels: Tensor::new(vec![np, NUM_CLASSES], floats(np * NUM_CLASSES)?)?,
                latents: ClipLatents { persons, objects },
            };
            match videos.last_mut() {
                Some(v) if v.id == video => v.clips.push(sample),
                _ => videos.push(Video {
                    id: video,
                    clips: vec![sample],
                }),
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(Error::format(path, format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { config, videos })
    }
}

/// Fraction of positive labels per class over `videos`.
pub fn prevalence<T: Scalar>(videos: &[Video<T>]) -> [f64; NUM_CLASSES] {
    let mut pos = [0usize; NUM_CLASSES];
    let mut n = 0usize;
    for clip in videos.iter().flat_map(|v| &v.clips) {
        for i in 0..clip.labels.rows() {
            n += 1;
            for (c, p) in pos.iter_mut().enumerate() {
                if clip.labels.at(i, c) == T::one() {
                    *p += 1;
                }
            }
        }
    }
    pos.map(|p| if n == 0 { 0.0 } else { p as f64 / n as f64 })
}
