use super::hztr::{read_hztr, write_hztr};
use super::scene::{gen_clean, gen_depth, SceneSpec};
use crate::asm::apply_asm;
use crate::{DepthMap, Error, HazeParams, Image, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";

/// Sampling ranges for haze parameters and depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamRanges {
    pub beta_clean: (f64, f64),
    pub beta_synth: (f64, f64),
    pub airlight: (f64, f64),
    pub depth: (f64, f64),
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            beta_clean: (0.02, 0.15),
            beta_synth: (0.4, 1.6),
            airlight: (0.7, 1.0),
            depth: (0.5, 3.0),
        }
    }
}

impl ParamRanges {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, (lo, hi): (f64, f64), min: f64, max: f64| {
            if !lo.is_finite() || !hi.is_finite() || lo > hi || lo < min || hi > max {
                return Err(Error::InvalidInput(format!(
                    "{name} range [{lo}, {hi}] must be ordered and inside [{min}, {max}]"
                )));
            }
            Ok(())
        };
        check("beta_clean", self.beta_clean, 0.0, f64::MAX)?;
        check("beta_synth", self.beta_synth, 0.0, f64::MAX)?;
        check("airlight", self.airlight, 0.0, 1.0)?;
        check("depth", self.depth, f64::MIN_POSITIVE, f64::MAX)?;
        if self.depth.0 >= self.depth.1 {
            return Err(Error::InvalidInput(format!(
                "depth range [{}, {}] must have z_min < z_max",
                self.depth.0, self.depth.1
            )));
        }
        Ok(())
    }

    fn contains(&self, clean: &HazeParams, synth: &HazeParams) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        inside(clean.beta, self.beta_clean)
            && inside(synth.beta, self.beta_synth)
            && clean.airlight.iter().chain(&synth.airlight).all(|a| inside(*a, self.airlight))
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws `(clean_params, synth_params)`; the two atmospheric lights are
/// independent.
pub fn sample_params(seed: u64, ranges: &ParamRanges) -> Result<(HazeParams, HazeParams)> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA7B1_0000_0000_0001);
    let clean = HazeParams {
        beta: uniform(&mut rng, ranges.beta_clean),
        airlight: std::array::from_fn(|_| uniform(&mut rng, ranges.airlight)),
    };
    let synth = HazeParams {
        beta: uniform(&mut rng, ranges.beta_synth),
        airlight: std::array::from_fn(|_| uniform(&mut rng, ranges.airlight)),
    };
    Ok((clean, synth))
}

/// One training pair with all the quantities that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    /// Ideal clean radiance `J`.
    pub ideal_clean: Image,
    /// Clean capture with residual haze, `I_c`.
    pub nonideal_clean: Image,
    /// Synthetic hazy input, `I_h`.
    pub synthetic_hazy: Image,
    pub depth: DepthMap,
    pub clean_params: HazeParams,
    pub synth_params: HazeParams,
    pub seed: u64,
}

/// `I_c = ASM(J; clean)`, `I_h = ASM(I_c; synth)`.
pub fn make_pair(
    ideal_clean: Image,
    depth: DepthMap,
    clean_params: HazeParams,
    synth_params: HazeParams,
    seed: u64,
) -> Result<PairedSample> {
    let nonideal_clean = apply_asm(&ideal_clean, &depth, &clean_params)?;
    let synthetic_hazy = apply_asm(&nonideal_clean, &depth, &synth_params)?;
    Ok(PairedSample {
        ideal_clean,
        nonideal_clean,
        synthetic_hazy,
        depth,
        clean_params,
        synth_params,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    pub height: usize,
    pub width: usize,
    pub ranges: ParamRanges,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_count: 512,
            test_count: 64,
            height: 64,
            width: 64,
            ranges: ParamRanges::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_count + self.test_count == 0 {
            return Err(Error::Config("dataset must contain at least one sample".into()));
        }
        self.ranges.validate()?;
        SceneSpec::from_seed(0, self.height, self.width).validate()
    }

    /// Seed of sample `index`, derived from the master seed.
    pub fn sample_seed(&self, index: usize) -> u64 {
        splitmix64(self.seed ^ splitmix64(index as u64 + 1))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub ideal_clean: String,
    pub nonideal_clean: String,
    pub synthetic_hazy: String,
    pub depth: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub split: Split,
    pub seed: u64,
    pub scene: SceneSpec,
    pub clean_params: HazeParams,
    pub synth_params: HazeParams,
    pub files: SampleFiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub sample_count: usize,
    pub height: usize,
    pub width: usize,
    pub ranges: ParamRanges,
    pub samples: Vec<SampleRecord>,
}

/// In-memory dataset: manifest plus samples in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&PairedSample> {
        self.manifest
            .samples
            .iter()
            .zip(&self.samples)
            .filter(|(r, _)| r.split == split)
            .map(|(_, s)| s)
            .collect()
    }

    pub fn train(&self) -> Vec<&PairedSample> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> Vec<&PairedSample> {
        self.split(Split::Test)
    }
}

fn file_names(index: usize) -> SampleFiles {
    SampleFiles {
        ideal_clean: format!("{index:05}_J.hztr"),
        nonideal_clean: format!("{index:05}_Ic.hztr"),
        synthetic_hazy: format!("{index:05}_Ih.hztr"),
        depth: format!("{index:05}_z.hztr"),
    }
}

fn generate_one(config: &DatasetConfig, index: usize) -> Result<(SampleRecord, PairedSample)> {
    let seed = config.sample_seed(index);
    let scene = SceneSpec::from_seed(seed, config.height, config.width);
    let clean = gen_clean(&scene)?;
    let depth = gen_depth(&scene, config.ranges.depth.0, config.ranges.depth.1)?;
    let (cp, sp) = sample_params(seed, &config.ranges)?;
    let sample = make_pair(clean, depth, cp, sp, seed)?;
    let record = SampleRecord {
        index,
        split: if index < config.train_count {
            Split::Train
        } else {
            Split::Test
        },
        seed,
        scene,
        clean_params: cp,
        synth_params: sp,
        files: file_names(index),
    };
    Ok((record, sample))
}

/// Builds the whole dataset; a pure function of `config`. `threads > 1`
/// splits samples across scoped worker threads without changing the output.
pub fn generate_dataset(config: &DatasetConfig, threads: usize) -> Result<Dataset> {
    config.validate()?;
    let total = config.train_count + config.test_count;
    let threads = threads.clamp(1, total);
    let mut results: Vec<Option<Result<(SampleRecord, PairedSample)>>> = (0..total).map(|_| None).collect();
    if threads == 1 {
        for (i, slot) in results.iter_mut().enumerate() {
            *slot = Some(generate_one(config, i));
        }
    } else {
        let chunk = total.div_ceil(threads);
        std::thread::scope(|s| {
            for (c, slots) in results.chunks_mut(chunk).enumerate() {
                s.spawn(move || {
                    for (j, slot) in slots.iter_mut().enumerate() {
                        *slot = Some(generate_one(config, c * chunk + j));
                    }
                });
            }
        });
    }
    let mut records = Vec::with_capacity(total);
    let mut samples = Vec::with_capacity(total);
    for r in results {
        let (rec, s) = r.expect("every slot filled")?;
        records.push(rec);
        samples.push(s);
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: MANIFEST_VERSION,
            master_seed: config.seed,
            sample_count: total,
            height: config.height,
            width: config.width,
            ranges: config.ranges,
            samples: records,
        },
        samples,
    })
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = &dataset.manifest;
    if m.samples.len() != dataset.samples.len() {
        return Err(Error::Contract(format!(
            "manifest lists {} samples, dataset holds {}",
            m.samples.len(),
            dataset.samples.len()
        )));
    }
    for (rec, s) in m.samples.iter().zip(&dataset.samples) {
        let (h, w) = (s.ideal_clean.height(), s.ideal_clean.width());
        write_hztr(&dir.join(&rec.files.ideal_clean), &[h, w, 3], s.ideal_clean.data())?;
        write_hztr(&dir.join(&rec.files.nonideal_clean), &[h, w, 3], s.nonideal_clean.data())?;
        write_hztr(&dir.join(&rec.files.synthetic_hazy), &[h, w, 3], s.synthetic_hazy.data())?;
        write_hztr(&dir.join(&rec.files.depth), &[h, w], s.depth.data())?;
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(m).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    // Version gate before anything else is interpreted.
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format {
            path: path.clone(),
            detail: "missing format_version".into(),
        })?;
    if found != MANIFEST_VERSION as u64 {
        return Err(Error::Version {
            path,
            found: found as u32,
            expected: MANIFEST_VERSION,
        });
    }
    let manifest: DatasetManifest = serde_json::from_value(value).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    if manifest.sample_count != manifest.samples.len() {
        return Err(Error::Integrity {
            path,
            detail: format!(
                "sample_count {} but {} records",
                manifest.sample_count,
                manifest.samples.len()
            ),
        });
    }
    if let Some(rec) = manifest
        .samples
        .iter()
        .find(|r| !manifest.ranges.contains(&r.clean_params, &r.synth_params))
    {
        return Err(Error::Integrity {
            path,
            detail: format!("sample {} has parameters outside the declared ranges", rec.index),
        });
    }
    let (h, w) = (manifest.height, manifest.width);
    let load_image = |name: &str| -> Result<Image> {
        let p: PathBuf = dir.join(name);
        let (dims, data) = read_hztr(&p)?;
        if dims != [h, w, 3] {
            return Err(Error::Integrity {
                path: p,
                detail: format!("dims {dims:?}, manifest says {h}x{w}x3"),
            });
        }
        Image::new(h, w, data).map_err(|e| Error::Integrity {
            path: p,
            detail: e.to_string(),
        })
    };
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        let zp = dir.join(&rec.files.depth);
        let (dims, zdata) = read_hztr(&zp)?;
        if dims != [h, w] {
            return Err(Error::Integrity {
                path: zp,
                detail: format!("dims {dims:?}, manifest says {h}x{w}"),
            });
        }
        let depth = DepthMap::new(h, w, zdata).map_err(|e| Error::Integrity {
            path: zp,
            detail: e.to_string(),
        })?;
        samples.push(PairedSample {
            ideal_clean: load_image(&rec.files.ideal_clean)?,
            nonideal_clean: load_image(&rec.files.nonideal_clean)?,
            synthetic_hazy: load_image(&rec.files.synthetic_hazy)?,
            depth,
            clean_params: rec.clean_params,
            synth_params: rec.synth_params,
            seed: rec.seed,
        });
    }
    Ok(Dataset { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::apply_double_asm;

    fn small_config(count: usize) -> DatasetConfig {
        DatasetConfig {
            seed: 11,
            train_count: count - 2,
            test_count: 2,
            height: 32,
            width: 32,
            ..Default::default()
        }
    }

    #[test]
    fn params_deterministic_and_in_range() {
        let r = ParamRanges::default();
        assert_eq!(sample_params(5, &r).unwrap(), sample_params(5, &r).unwrap());
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for seed in 0..1000 {
            let (c, s) = sample_params(seed, &r).unwrap();
            lo = lo.min(c.beta);
            hi = hi.max(c.beta);
            assert!((0.4..=1.6).contains(&s.beta));
            assert!(c.airlight.iter().chain(&s.airlight).all(|a| (0.7..=1.0).contains(a)));
        }
        assert!(lo >= 0.02 && hi <= 0.15, "[{lo}, {hi}]");
    }

    #[test]
    fn point_ranges_are_exact() {
        let r = ParamRanges {
            beta_clean: (0.07, 0.07),
            beta_synth: (0.9, 0.9),
            airlight: (0.8, 0.8),
            ..Default::default()
        };
        let (c, s) = sample_params(3, &r).unwrap();
        assert_eq!(c.beta, 0.07);
        assert_eq!(s.beta, 0.9);
        assert!(c.airlight.iter().chain(&s.airlight).all(|a| *a == 0.8));
    }

    #[test]
    fn inverted_ranges_rejected() {
        let r = ParamRanges {
            beta_synth: (1.0, 0.5),
            ..Default::default()
        };
        assert!(sample_params(0, &r).is_err());
        let r = ParamRanges {
            airlight: (0.5, 1.5),
            ..Default::default()
        };
        assert!(sample_params(0, &r).is_err());
    }

    fn scene_pair() -> (Image, DepthMap) {
        let spec = SceneSpec::from_seed(4, 32, 32);
        (gen_clean(&spec).unwrap(), gen_depth(&spec, 0.5, 3.0).unwrap())
    }

    #[test]
    fn make_pair_degenerate_cases() {
        let (j, z) = scene_pair();
        let p = HazeParams::new(0.8, [0.9, 0.85, 0.95]).unwrap();
        let s = make_pair(j.clone(), z.clone(), HazeParams { beta: 0.0, ..p }, p, 0).unwrap();
        assert_eq!(s.nonideal_clean, j);
        let s = make_pair(j.clone(), z, p, HazeParams { beta: 0.0, ..p }, 0).unwrap();
        assert_eq!(s.synthetic_hazy, s.nonideal_clean);
    }

    #[test]
    fn make_pair_matches_double_haze() {
        let (j, z) = scene_pair();
        let (c, h) = sample_params(9, &ParamRanges::default()).unwrap();
        let s = make_pair(j.clone(), z.clone(), c, h, 9).unwrap();
        let direct = apply_double_asm(&j, &z, &c, &h).unwrap();
        for (a, b) in s.synthetic_hazy.data().iter().zip(direct.data()) {
            assert!((a - b).abs() <= 1e-6);
        }

        let j = Image::filled(8, 8, [0.2; 3]).unwrap();
        let z = DepthMap::filled(8, 8, 1.0).unwrap();
        let s = make_pair(
            j,
            z,
            HazeParams::new(0.5, [0.8; 3]).unwrap(),
            HazeParams::new(0.3, [1.0; 3]).unwrap(),
            0,
        )
        .unwrap();
        assert!(s.synthetic_hazy.data().iter().all(|v| (v - 0.582_239).abs() < 1e-6));
    }

    #[test]
    fn make_pair_shape_mismatch() {
        let (j, _) = scene_pair();
        let z = DepthMap::filled(32, 36, 1.0).unwrap();
        assert!(matches!(
            make_pair(j, z, HazeParams::clear(), HazeParams::clear(), 0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn residual_haze_touches_nearly_every_pixel() {
        let ds = generate_dataset(&small_config(6), 1).unwrap();
        for s in &ds.samples {
            assert!(s.clean_params.beta * ds.manifest.ranges.depth.0 > 0.01);
            let changed = s
                .ideal_clean
                .data()
                .chunks_exact(3)
                .zip(s.nonideal_clean.data().chunks_exact(3))
                .filter(|(a, b)| a != b)
                .count();
            assert!(changed as f64 > 0.99 * s.ideal_clean.pixel_count() as f64);
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ds = generate_dataset(&small_config(8), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        for s in &back.samples {
            let ic = apply_asm(&s.ideal_clean, &s.depth, &s.clean_params).unwrap();
            let ih = apply_asm(&ic, &s.depth, &s.synth_params).unwrap();
            assert_eq!(ic, s.nonideal_clean);
            assert_eq!(ih, s.synthetic_hazy);
        }
    }

    #[test]
    fn threads_do_not_change_output() {
        let cfg = small_config(7);
        assert_eq!(generate_dataset(&cfg, 1).unwrap(), generate_dataset(&cfg, 3).unwrap());
    }

    #[test]
    fn truncated_raster_names_file() {
        let ds = generate_dataset(&small_config(3), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let victim = dir.path().join("00001_Ih.hztr");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Integrity { ref path, .. } if path == &victim), "{err}");
        assert!(err.to_string().contains("00001_Ih.hztr"));
    }

    #[test]
    fn missing_file_is_integrity_error() {
        let ds = generate_dataset(&small_config(3), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("00002_z.hztr")).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Integrity { .. })));
    }

    #[test]
    fn unknown_manifest_version_rejected() {
        let ds = generate_dataset(&small_config(3), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let mp = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mp).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
        fs::write(&mp, text).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Version { found: 99, .. })));
    }

    #[test]
    fn out_of_range_params_rejected() {
        let mut ds = generate_dataset(&small_config(3), 1).unwrap();
        ds.manifest.samples[0].synth_params.beta = 5.0;
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Integrity { .. })));
    }
}
