//! Synthetic multi-site segmentation data: ellipsoidal bright bodies in a
//! noisy slab of consecutive slices. Site parameters shift the position,
//! scale, intensity, and noise priors, which makes per-site distributions
//! measurably different (non-iid) while the task itself stays identical.

use super::TrainError;
use crate::model::ModelConfig;
use crate::rngutil;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use std::io::Read;
use std::path::Path;

/// One training example: a slab of slices plus the ground-truth mask of the
/// center slice. Volume values are quantized to f32 at generation so cache
/// files round-trip bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub volume: Vec<f64>,
    pub mask: Vec<u8>,
}

/// Geometry and intensity priors defining one site's distribution.
/// Positions and radii are fractions of the image side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteParams {
    pub center_x: (f64, f64),
    pub center_y: (f64, f64),
    pub radius: (f64, f64),
    pub intensity: (f64, f64),
    pub noise: f64,
    /// Half-depth of the body in slices.
    pub depth_radius: (f64, f64),
}

impl SiteParams {
    fn validate(&self) -> Result<(), TrainError> {
        let ranges = [
            ("center_x", self.center_x),
            ("center_y", self.center_y),
            ("radius", self.radius),
            ("intensity", self.intensity),
            ("depth_radius", self.depth_radius),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
                return Err(TrainError::DegenerateSite(format!(
                    "empty {name} range [{lo}, {hi})"
                )));
            }
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(TrainError::DegenerateSite(format!(
                "invalid noise level {}",
                self.noise
            )));
        }
        Ok(())
    }
}

/// Distinct priors per site id. Position priors are wide (a handful of
/// samples under-covers them, so isolated training overfits) and shifted
/// per site; intensity and noise levels differ as well, so the sites are
/// non-iid without changing the task.
pub fn default_site_params(site: u32) -> SiteParams {
    let presets = [
        SiteParams {
            center_x: (0.22, 0.62),
            center_y: (0.22, 0.62),
            radius: (0.18, 0.30),
            intensity: (0.70, 1.00),
            noise: 0.15,
            depth_radius: (1.5, 2.5),
        },
        SiteParams {
            center_x: (0.38, 0.78),
            center_y: (0.30, 0.70),
            radius: (0.16, 0.28),
            intensity: (0.50, 0.80),
            noise: 0.22,
            depth_radius: (1.2, 2.2),
        },
        SiteParams {
            center_x: (0.30, 0.70),
            center_y: (0.38, 0.78),
            radius: (0.20, 0.32),
            intensity: (0.90, 1.20),
            noise: 0.10,
            depth_radius: (1.8, 2.8),
        },
        SiteParams {
            center_x: (0.25, 0.65),
            center_y: (0.35, 0.75),
            radius: (0.16, 0.26),
            intensity: (0.60, 0.95),
            noise: 0.18,
            depth_radius: (1.4, 2.4),
        },
        SiteParams {
            center_x: (0.35, 0.75),
            center_y: (0.25, 0.65),
            radius: (0.18, 0.28),
            intensity: (0.75, 1.05),
            noise: 0.12,
            depth_radius: (1.6, 2.6),
        },
        SiteParams {
            center_x: (0.28, 0.68),
            center_y: (0.28, 0.68),
            radius: (0.17, 0.29),
            intensity: (0.70, 1.00),
            noise: 0.16,
            depth_radius: (1.5, 2.5),
        },
    ];
    presets[site as usize % presets.len()]
}

/// One site's dataset with disjoint train/test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSite {
    pub id: u32,
    pub seed: u64,
    pub params: SiteParams,
    pub slices: usize,
    pub image_size: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn gen_sample(rng: &mut ChaCha8Rng, params: &SiteParams, slices: usize, side: usize) -> Sample {
    let s = side as f64;
    let cx = rngutil::uniform(rng, params.center_x.0, params.center_x.1) * s;
    let cy = rngutil::uniform(rng, params.center_y.0, params.center_y.1) * s;
    let rx = rngutil::uniform(rng, params.radius.0, params.radius.1) * s;
    let ry = rngutil::uniform(rng, params.radius.0, params.radius.1) * s;
    let rz = rngutil::uniform(rng, params.depth_radius.0, params.depth_radius.1);
    let fg = rngutil::uniform(rng, params.intensity.0, params.intensity.1);
    let cz = (slices as f64 - 1.0) / 2.0;

    let mut volume = vec![0.0f64; slices * side * side];
    let mut mask = vec![0u8; side * side];
    for z in 0..slices {
        let dz = (z as f64 - cz) / rz;
        for y in 0..side {
            let dy = (y as f64 - cy) / ry;
            for x in 0..side {
                let dx = (x as f64 - cx) / rx;
                let inside = dx * dx + dy * dy + dz * dz <= 1.0;
                let mut v = if inside { fg } else { 0.0 };
                if params.noise > 0.0 {
                    v += params.noise * rngutil::gaussian(rng);
                }
                // f32 quantization keeps cache files lossless.
                volume[(z * side + y) * side + x] = v as f32 as f64;
                if inside && z as f64 == cz {
                    mask[y * side + x] = 1;
                }
            }
        }
    }
    Sample { volume, mask }
}

/// Deterministic dataset for one site. Train and test samples come from one
/// RNG stream, so the splits are disjoint draws by construction.
pub fn gen_site(
    seed: u64,
    id: u32,
    params: &SiteParams,
    n_train: usize,
    n_test: usize,
    cfg: &ModelConfig,
) -> Result<SyntheticSite, TrainError> {
    assert!(n_train >= 1 && n_test >= 1, "need at least one sample per split");
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rngutil::derive_seed(seed, &[0x5174, id as u64]));
    let train = (0..n_train)
        .map(|_| gen_sample(&mut rng, params, cfg.input_slices, cfg.image_size))
        .collect();
    let test = (0..n_test)
        .map(|_| gen_sample(&mut rng, params, cfg.input_slices, cfg.image_size))
        .collect();
    Ok(SyntheticSite {
        id,
        seed,
        params: *params,
        slices: cfg.input_slices,
        image_size: cfg.image_size,
        train,
        test,
    })
}

const CACHE_MAGIC: &[u8; 4] = b"FSSC";
const CACHE_VERSION: u16 = 1;

/// Serialize a site to its cache blob: header (seed, params, counts) then
/// per-sample f32 volumes and u8 masks.
pub fn write_site_cache(site: &SyntheticSite, path: &Path) -> Result<(), TrainError> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&site.id.to_le_bytes());
    out.extend_from_slice(&site.seed.to_le_bytes());
    for v in [
        site.params.center_x.0,
        site.params.center_x.1,
        site.params.center_y.0,
        site.params.center_y.1,
        site.params.radius.0,
        site.params.radius.1,
        site.params.intensity.0,
        site.params.intensity.1,
        site.params.noise,
        site.params.depth_radius.0,
        site.params.depth_radius.1,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(site.slices as u16).to_le_bytes());
    out.extend_from_slice(&(site.image_size as u16).to_le_bytes());
    out.extend_from_slice(&(site.train.len() as u32).to_le_bytes());
    out.extend_from_slice(&(site.test.len() as u32).to_le_bytes());
    for s in site.train.iter().chain(&site.test) {
        for &v in &s.volume {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&s.mask);
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.buf.len() {
            return Err(TrainError::MalformedCache("truncated".to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, TrainError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, TrainError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_site_cache(path: &Path) -> Result<SyntheticSite, TrainError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != CACHE_MAGIC {
        return Err(TrainError::MalformedCache("bad magic".to_string()));
    }
    let version = cur.u16()?;
    if version != CACHE_VERSION {
        return Err(TrainError::MalformedCache(format!(
            "unsupported version {version}"
        )));
    }
    let id = cur.u32()?;
    let seed = cur.u64()?;
    let mut f = [0.0f64; 11];
    for v in f.iter_mut() {
        *v = cur.f64()?;
    }
    let params = SiteParams {
        center_x: (f[0], f[1]),
        center_y: (f[2], f[3]),
        radius: (f[4], f[5]),
        intensity: (f[6], f[7]),
        noise: f[8],
        depth_radius: (f[9], f[10]),
    };
    let slices = cur.u16()? as usize;
    let image_size = cur.u16()? as usize;
    let n_train = cur.u32()? as usize;
    let n_test = cur.u32()? as usize;
    let vol_len = slices * image_size * image_size;
    let mask_len = image_size * image_size;
    let mut samples = Vec::with_capacity(n_train + n_test);
    for _ in 0..n_train + n_test {
        let raw = cur.take(4 * vol_len)?;
        let volume: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let mask = cur.take(mask_len)?.to_vec();
        samples.push(Sample { volume, mask });
    }
    if cur.pos != buf.len() {
        return Err(TrainError::MalformedCache("trailing bytes".to_string()));
    }
    let test = samples.split_off(n_train);
    Ok(SyntheticSite {
        id,
        seed,
        params,
        slices,
        image_size,
        train: samples,
        test,
    })
}
