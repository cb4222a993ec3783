//! Deterministic synthetic continual benchmark.
//!
//! Each task owns a few orthonormal region prototypes in patch-pixel space,
//! tiled over the patch grid in stripes. Normal images add uniform noise
//! inside a small ball to every patch. Anomalous test images shift a square
//! block of patches along a direction held out from every task. Patch pixel
//! vectors go through the seeded synthetic backbone and are written as MTNS
//! feature files, so the engine only ever sees precomputed features.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{write_feature_map, Backbone, BackboneConfig, BackboneInput, BackboneKind, PatchGrid};
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, Vector};
use crate::tensor_store::{
    write_tensor, DatasetManifest, ManifestDoc, TaskDoc, TensorFile, TestItemDoc, TrainItemDoc,
};
use crate::trainer::PseudoLabelGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub tasks: usize,
    pub train_images: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub regions: usize,
    /// Length of each patch pixel vector.
    pub pixel_dim: usize,
    /// Feature dimension written to disk.
    pub dim: usize,
    /// Norm of each region prototype.
    pub prototype_scale: f64,
    /// Radius of the per-patch noise ball.
    pub noise: f64,
    /// Shift applied to anomalous patches along the held-out direction.
    pub anomaly_magnitude: f64,
    /// Side of the square block of anomalous patches.
    pub anomaly_block: usize,
    pub key_layer: usize,
    pub score_layer: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            tasks: 5,
            train_images: 50,
            test_normal: 20,
            test_anomalous: 20,
            image_h: 64,
            image_w: 64,
            grid_h: 8,
            grid_w: 8,
            regions: 2,
            pixel_dim: 16,
            dim: 32,
            prototype_scale: 2.0,
            noise: 0.1,
            anomaly_magnitude: 0.5,
            anomaly_block: 2,
            key_layer: crate::backbone::DEFAULT_KEY_LAYER,
            score_layer: crate::backbone::DEFAULT_SCORE_LAYER,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tasks == 0 || self.regions == 0 {
            return bad("tasks and regions must be at least 1".into());
        }
        if self.train_images == 0 || self.test_normal + self.test_anomalous == 0 {
            return bad("every task needs training and test images".into());
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.image_h < self.grid_h || self.image_w < self.grid_w {
            return bad(format!(
                "{}x{} image cannot hold a {}x{} patch grid",
                self.image_h, self.image_w, self.grid_h, self.grid_w
            ));
        }
        if self.regions > self.grid_h.max(self.grid_w) {
            return bad(format!("{} regions do not fit the patch grid", self.regions));
        }
        let needed = self.tasks * self.regions + 1;
        if self.pixel_dim < needed {
            return bad(format!(
                "pixel_dim {} cannot hold {needed} orthogonal directions",
                self.pixel_dim
            ));
        }
        if self.anomaly_block == 0 || self.anomaly_block > self.grid_h.min(self.grid_w) {
            return bad(format!(
                "anomaly block {} does not fit the grid",
                self.anomaly_block
            ));
        }
        if !(self.anomaly_magnitude >= 0.0 && self.noise >= 0.0 && self.prototype_scale > 0.0) {
            return bad("magnitudes must be non-negative and the prototype scale positive".into());
        }
        if self.dim == 0 {
            return bad("dim must be at least 1".into());
        }
        Ok(())
    }

    fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            kind: BackboneKind::Synthetic,
            seed: self.seed,
            key_layer: self.key_layer,
            score_layer: self.score_layer,
            dim: self.dim,
            input_dim: self.pixel_dim,
        }
    }
}

/// Prototype geometry shared by all generated images.
#[derive(Debug, Clone)]
pub struct SynthGeometry {
    /// `prototypes[t][r]`, pixel space.
    pub prototypes: Vec<Vec<Vector>>,
    /// Unit direction used for anomalies, orthogonal to every prototype.
    pub anomaly_direction: Vector,
    /// Unit text vector per task, feature space.
    pub texts: Vec<Vector>,
}

/// Gram-Schmidt on Gaussian draws; returns `count` orthonormal vectors.
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = crate::numerics::norm(&v);
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    orthonormal(rng, 1, dim)
        .pop()
        .map(Vector::from_raw)
        .expect("one vector")
}

pub fn geometry(spec: &SynthSpec) -> Result<SynthGeometry> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut basis = orthonormal(&mut rng, spec.tasks * spec.regions + 1, spec.pixel_dim);
    let anomaly_direction = Vector::from_raw(basis.pop().expect("anomaly direction"));
    let prototypes = basis
        .chunks(spec.regions)
        .map(|c| {
            c.iter()
                .map(|b| Vector::from_raw(b.iter().map(|x| x * spec.prototype_scale).collect()))
                .collect()
        })
        .collect();
    let texts = (0..spec.tasks).map(|_| unit(&mut rng, spec.dim)).collect();
    Ok(SynthGeometry {
        prototypes,
        anomaly_direction,
        texts,
    })
}

/// Region of patch (r, c) for task `t`: horizontal stripes on even tasks,
/// vertical on odd ones.
pub fn region_of(spec: &SynthSpec, task: usize, r: usize, c: usize) -> usize {
    if task % 2 == 0 {
        r * spec.regions / spec.grid_h
    } else {
        c * spec.regions / spec.grid_w
    }
}

fn ball_sample(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    if radius == 0.0 {
        return vec![0.0; dim];
    }
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = crate::numerics::norm(&v).max(f64::MIN_POSITIVE);
    let u: f64 = rng.random();
    let r = radius * u.powf(1.0 / dim as f64);
    v.iter_mut().for_each(|x| *x *= r / n);
    v
}

struct Image {
    pixels: PatchGrid,
    /// Anomalous patch block as (row, col) of its top-left patch.
    block: Option<(usize, usize)>,
}

fn make_image(
    spec: &SynthSpec,
    geo: &SynthGeometry,
    task: usize,
    rng: &mut ChaCha8Rng,
    anomalous: bool,
) -> Result<Image> {
    let (gh, gw, pd) = (spec.grid_h, spec.grid_w, spec.pixel_dim);
    let block = anomalous.then(|| {
        (
            rng.random_range(0..=gh - spec.anomaly_block),
            rng.random_range(0..=gw - spec.anomaly_block),
        )
    });
    let mut data = Vec::with_capacity(gh * gw * pd);
    for r in 0..gh {
        for c in 0..gw {
            let proto = &geo.prototypes[task][region_of(spec, task, r, c)];
            let noise = ball_sample(rng, pd, spec.noise);
            let shifted = block.is_some_and(|(br, bc)| {
                (br..br + spec.anomaly_block).contains(&r) && (bc..bc + spec.anomaly_block).contains(&c)
            });
            for k in 0..pd {
                let mut v = proto.as_slice()[k] + noise[k];
                if shifted {
                    v += spec.anomaly_magnitude * geo.anomaly_direction.as_slice()[k];
                }
                data.push(v);
            }
        }
    }
    Ok(Image {
        pixels: PatchGrid::new(gh, gw, Matrix::new(gh * gw, pd, data)?)?,
        block,
    })
}

/// Pixel-resolution label grid: each pixel takes the value of its patch cell.
fn pixel_grid(spec: &SynthSpec, cell_value: impl Fn(usize, usize) -> u32) -> PseudoLabelGrid {
    let mut labels = Vec::with_capacity(spec.image_h * spec.image_w);
    for y in 0..spec.image_h {
        let r = cell_index(y, spec.grid_h, spec.image_h);
        for x in 0..spec.image_w {
            labels.push(cell_value(r, cell_index(x, spec.grid_w, spec.image_w)));
        }
    }
    PseudoLabelGrid {
        h: spec.image_h,
        w: spec.image_w,
        labels,
    }
}

/// Inverse of the floor partition used when patchifying labels.
fn cell_index(p: usize, cells: usize, len: usize) -> usize {
    (p / (len / cells)).min(cells - 1)
}

fn rel(path: &Path, root: &Path) -> String {
    path.strip_prefix(root)
        .expect("generated paths live under the output root")
        .to_string_lossy()
        .replace('\\', "/")
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Write the benchmark under `out_dir` and return its resolved manifest.
pub fn generate(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = out_dir.as_ref();
    let geo = geometry(spec)?;
    let backbone = Backbone::new(spec.backbone_config())?;
    mkdir(root)?;
    let mut tasks = Vec::with_capacity(spec.tasks);
    for t in 0..spec.tasks {
        let name = format!("synth_{t}");
        let tdir = root.join(&name);
        let (train_dir, test_dir) = (tdir.join("train"), tdir.join("test"));
        mkdir(&train_dir)?;
        mkdir(&test_dir)?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(spec.seed ^ (0xA076_1D64_78BD_642Fu64.wrapping_mul(t as u64 + 1)));

        let text_path = tdir.join("text.mtns");
        write_tensor(&text_path, &TensorFile::from_vector(&geo.texts[t])?)?;
        let label_grid = pixel_grid(spec, |r, c| region_of(spec, t, r, c) as u32);

        let mut train_items = Vec::with_capacity(spec.train_images);
        for i in 0..spec.train_images {
            let img = make_image(spec, &geo, t, &mut rng, false)?;
            let feats = backbone.extract(BackboneInput::Pixels(&img.pixels))?;
            let fpath = train_dir.join(format!("{i:03}.mtns"));
            let mpath = train_dir.join(format!("{i:03}_mask.mtns"));
            write_feature_map(&fpath, &feats)?;
            write_tensor(&mpath, &label_grid.to_tensor()?)?;
            train_items.push(TrainItemDoc {
                features: rel(&fpath, root),
                mask: rel(&mpath, root),
            });
        }

        let mut test_items = Vec::with_capacity(spec.test_normal + spec.test_anomalous);
        for i in 0..spec.test_normal + spec.test_anomalous {
            let anomalous = i >= spec.test_normal;
            let img = make_image(spec, &geo, t, &mut rng, anomalous)?;
            let feats = backbone.extract(BackboneInput::Pixels(&img.pixels))?;
            let fpath = test_dir.join(format!("{i:03}.mtns"));
            write_feature_map(&fpath, &feats)?;
            let pixel_mask = match img.block {
                Some((br, bc)) => {
                    let b = spec.anomaly_block;
                    let mask = pixel_grid(spec, |r, c| {
                        u32::from((br..br + b).contains(&r) && (bc..bc + b).contains(&c))
                    });
                    let mpath = test_dir.join(format!("{i:03}_mask.mtns"));
                    write_tensor(&mpath, &mask.to_tensor()?)?;
                    Some(rel(&mpath, root))
                }
                None => None,
            };
            test_items.push(TestItemDoc {
                features: rel(&fpath, root),
                image_label: u8::from(anomalous),
                pixel_mask,
            });
        }
        tasks.push(TaskDoc {
            name,
            text_feature: rel(&text_path, root),
            train_items,
            test_items,
        });
    }
    let doc = ManifestDoc { tasks };
    doc.save(manifest_path(root))?;
    Ok(doc.resolve(root))
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.json")
}
