//! Dataset ingestion: CIFAR-10 binary batches, a raw-tensor image folder,
//! and a procedural generator for fully offline runs. All loaders produce
//! [0,1] pixel values in N,C,H,W layout.

use std::fs;
use std::path::{Path, PathBuf};

use hqvae_tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::DataCfg;
use crate::error::{Error, Result};

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

#[derive(Clone)]
pub struct Dataset {
    images: Vec<f32>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    pub provenance: String,
}

impl Dataset {
    fn new(n: usize, c: usize, h: usize, w: usize, provenance: String) -> Dataset {
        Dataset { images: vec![0.0; n * c * h * w], n, c, h, w, provenance }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let sz = self.c * self.h * self.w;
        &self.images[i * sz..(i + 1) * sz]
    }

    fn image_mut(&mut self, i: usize) -> &mut [f32] {
        let sz = self.c * self.h * self.w;
        &mut self.images[i * sz..(i + 1) * sz]
    }

    /// Stacks the indexed images into a [B, C, H, W] tensor.
    pub fn batch_tensor<T: Scalar>(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let sz = self.c * self.h * self.w;
        let mut data = Vec::with_capacity(idx.len() * sz);
        for &i in idx {
            if i >= self.n {
                return Err(Error::config(format!("image index {i} out of range {}", self.n)));
            }
            data.extend(self.image(i).iter().map(|&v| T::from_f64(v as f64)));
        }
        Ok(Tensor::from_vec(&[idx.len(), self.c, self.h, self.w], data)?)
    }

    /// Order-sensitive content fingerprint (FNV-1a over pixel bits).
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.images {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        for d in [self.n, self.c, self.h, self.w] {
            for b in (d as u64).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    fn take(&self, idx: &[usize], provenance: String) -> Dataset {
        let mut out = Dataset::new(idx.len(), self.c, self.h, self.w, provenance);
        for (j, &i) in idx.iter().enumerate() {
            out.image_mut(j).copy_from_slice(self.image(i));
        }
        out
    }
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Batch index order for one training epoch: seeded shuffle, partial tail
/// batch dropped.
pub fn epoch_order(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
    idx.shuffle(&mut rng);
    idx.chunks(batch).filter(|c| c.len() == batch).map(|c| c.to_vec()).collect()
}

/// Sequential full coverage for validation and test passes; the tail batch
/// is kept.
pub fn eval_order(n: usize, batch: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(batch).map(|c| c.to_vec()).collect()
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_cifar_file(path: &Path, out: &mut Dataset, at: &mut usize) -> Result<()> {
    let bytes = read_file(path)?;
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::data(
            path,
            format!(
                "truncated record at byte {offset}: {} trailing bytes, record size is {CIFAR_RECORD}",
                bytes.len() - offset
            ),
        ));
    }
    for rec in bytes.chunks(CIFAR_RECORD) {
        let img = out.image_mut(*at);
        for (dst, &src) in img.iter_mut().zip(&rec[1..1 + CIFAR_PIXELS]) {
            *dst = src as f32 / 255.0;
        }
        *at += 1;
    }
    Ok(())
}

fn cifar_count(path: &Path) -> Result<usize> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    Ok(meta.len() as usize / CIFAR_RECORD)
}

/// Loads the CIFAR-10 binary batches under `dir` and splits them: train and
/// validation are disjoint seeded draws from the five training batches, test
/// comes from the test batch.
pub fn load_cifar10(dir: &Path, cfg: &DataCfg, seed: u64) -> Result<Splits> {
    let train_files: Vec<PathBuf> =
        (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let test_file = dir.join("test_batch.bin");
    for p in train_files.iter().chain([&test_file]) {
        if !p.exists() {
            return Err(Error::data(p, "missing CIFAR-10 batch file".to_string()));
        }
    }
    let mut pool_n = 0;
    for p in &train_files {
        pool_n += cifar_count(p)?;
    }
    let test_n = cifar_count(&test_file)?;

    let mut pool = Dataset::new(pool_n, 3, 32, 32, format!("cifar10:{}", dir.display()));
    let mut at = 0;
    for p in &train_files {
        parse_cifar_file(p, &mut pool, &mut at)?;
    }
    let mut test_pool = Dataset::new(test_n, 3, 32, 32, format!("cifar10-test:{}", dir.display()));
    let mut at = 0;
    parse_cifar_file(&test_file, &mut test_pool, &mut at)?;

    if cfg.train_images + cfg.val_images > pool_n {
        return Err(Error::config(format!(
            "requested {} train + {} val images from a pool of {pool_n}",
            cfg.train_images, cfg.val_images
        )));
    }
    if cfg.test_images > test_n {
        return Err(Error::config(format!(
            "requested {} test images from a pool of {test_n}",
            cfg.test_images
        )));
    }

    let mut order: Vec<usize> = (0..pool_n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let train_idx = &order[..cfg.train_images];
    let val_idx = &order[cfg.train_images..cfg.train_images + cfg.val_images];
    let mut test_order: Vec<usize> = (0..test_n).collect();
    test_order.shuffle(&mut rng);
    let test_idx = &test_order[..cfg.test_images];

    let prov = |tag: &str| format!("cifar10-{tag}:{}", dir.display());
    Ok(Splits {
        train: pool.take(train_idx, prov("train")),
        val: pool.take(val_idx, prov("val")),
        test: test_pool.take(test_idx, prov("test")),
    })
}

/// Shaded fill: two colors blended along a random direction across the
/// shape's own extent, so interiors carry ramps instead of flat color.
struct Shade {
    c0: [f32; 3],
    c1: [f32; 3],
    dx: f64,
    dy: f64,
    orig: (f64, f64),
    span: f64,
}

impl Shade {
    fn draw(rng: &mut ChaCha8Rng, orig: (f64, f64), span: f64) -> Self {
        let c0 = std::array::from_fn(|_| rng.random_range(0.08..0.92));
        let c1 = std::array::from_fn(|_| rng.random_range(0.08..0.92));
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        Shade { c0, c1, dx: theta.cos(), dy: theta.sin(), orig, span: span.max(1.0) }
    }

    fn at(&self, x: f64, y: f64, ch: usize) -> f32 {
        let t = (((x - self.orig.0) * self.dx + (y - self.orig.1) * self.dy) / self.span)
            .clamp(-1.0, 1.0) as f32
            * 0.5
            + 0.5;
        self.c0[ch] + (self.c1[ch] - self.c0[ch]) * t
    }
}

fn blend(img: &mut [f32], plane: usize, size: usize, x: usize, y: usize, cov: f64, col: [f32; 3]) {
    if cov <= 0.0 {
        return;
    }
    let a = cov.min(1.0) as f32;
    for (ch, c) in col.iter().enumerate() {
        let p = &mut img[ch * plane + y * size + x];
        *p += (c - *p) * a;
    }
}

fn fill_blob_image(
    img: &mut [f32],
    size: usize,
    rng: &mut ChaCha8Rng,
    shapes: std::ops::RangeInclusive<usize>,
) {
    let plane = size * size;
    let sf = size as f64;
    // gradient background between two soft colors along a random direction
    let bg = Shade::draw(rng, (sf / 2.0, sf / 2.0), sf / 2.0);
    for y in 0..size {
        for x in 0..size {
            for ch in 0..3 {
                img[ch * plane + y * size + x] = bg.at(x as f64 + 0.5, y as f64 + 0.5, ch);
            }
        }
    }
    // shaded rectangles and circles with soft edges; some translucent, and
    // some circles carry a darker rim, so edges and overlaps add fine detail
    let count = rng.random_range(shapes);
    for _ in 0..count {
        let alpha = if rng.random::<f64>() < 0.6 { 1.0 } else { rng.random_range(0.5..0.85) };
        if rng.random::<bool>() {
            let w = rng.random_range(sf / 8.0..sf / 2.0);
            let h = rng.random_range(sf / 8.0..sf / 2.0);
            let x0 = rng.random_range(-w / 4.0..sf - w / 2.0);
            let y0 = rng.random_range(-h / 4.0..sf - h / 2.0);
            let s = Shade::draw(rng, (x0 + w / 2.0, y0 + h / 2.0), (w + h) / 2.0);
            let (x1, y1) = (x0 + w, y0 + h);
            for y in y0.floor().max(0.0) as usize..(y1.ceil().min(sf) as usize) {
                let cy = (y as f64 + 1.0).min(y1) - (y as f64).max(y0);
                for x in x0.floor().max(0.0) as usize..(x1.ceil().min(sf) as usize) {
                    let cx = (x as f64 + 1.0).min(x1) - (x as f64).max(x0);
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let col = std::array::from_fn(|ch| s.at(px, py, ch));
                    blend(img, plane, size, x, y, cx.max(0.0) * cy.max(0.0) * alpha, col);
                }
            }
        } else {
            let r = rng.random_range(sf / 10.0..sf / 3.0);
            let cx = rng.random_range(0.0..sf);
            let cy = rng.random_range(0.0..sf);
            let rim = if rng.random::<f64>() < 0.4 { rng.random_range(1.0..2.0) } else { 0.0 };
            let s = Shade::draw(rng, (cx, cy), r);
            let lo = |c: f64| (c - r - 1.0).floor().max(0.0) as usize;
            let hi = |c: f64| ((c + r + 1.0).ceil().min(sf) as usize).max(lo(c));
            for y in lo(cy)..hi(cy) {
                for x in lo(cx)..hi(cx) {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                    let cov = (r - d + 0.5).clamp(0.0, 1.0);
                    if cov > 0.0 {
                        let dark = if rim > 0.0 && d >= r - rim { 0.45f32 } else { 1.0 };
                        let col = std::array::from_fn(|ch| s.at(px, py, ch) * dark);
                        blend(img, plane, size, x, y, cov * alpha, col);
                    }
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Procedural images: gradient backgrounds with shaded rectangles and
/// circles, giving coarse, mid, and fine structure for hierarchy tests.
/// The shape count per image is drawn from `shapes`.
pub fn synth_blobs_with(
    n: usize,
    size: usize,
    seed: u64,
    shapes: std::ops::RangeInclusive<usize>,
) -> Dataset {
    let mut out = Dataset::new(n, 3, size, size, format!("synth:{seed}:{n}x{size}"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        fill_blob_image(out.image_mut(i), size, &mut rng, shapes.clone());
    }
    out
}

/// [`synth_blobs_with`] at the default complexity.
pub fn synth_blobs(n: usize, size: usize, seed: u64) -> Dataset {
    synth_blobs_with(n, size, seed, 3..=7)
}

/// Disjoint train/val/test splits drawn from one generator stream.
pub fn synth_splits(cfg: &DataCfg, seed: u64) -> Dataset {
    let n = cfg.train_images + cfg.val_images + cfg.test_images;
    synth_blobs_with(n, cfg.image_size, seed, cfg.synth_shapes[0]..=cfg.synth_shapes[1])
}

fn split_synth(all: Dataset, cfg: &DataCfg) -> Splits {
    let t = cfg.train_images;
    let v = cfg.val_images;
    let idx: Vec<usize> = (0..all.len()).collect();
    Splits {
        train: all.take(&idx[..t], format!("{}-train", all.provenance)),
        val: all.take(&idx[t..t + v], format!("{}-val", all.provenance)),
        test: all.take(&idx[t + v..], format!("{}-test", all.provenance)),
    }
}

/// Raw-tensor folder: each `.hqi` file is "HQI1", u32 C, H, W (LE), then
/// C*H*W little-endian f32 pixels in [0,1]. Files sort by name; all images
/// must agree on shape.
pub fn load_raw_dir(dir: &Path) -> Result<Dataset> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "hqi"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::data(dir, "no .hqi files".to_string()));
    }
    let mut out: Option<Dataset> = None;
    for (i, path) in files.iter().enumerate() {
        let bytes = read_file(path)?;
        if bytes.len() < 16 || &bytes[..4] != b"HQI1" {
            return Err(Error::data(path, "bad header, expected HQI1 magic".to_string()));
        }
        let rd = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let (c, h, w) = (rd(4), rd(8), rd(12));
        let need = 16 + c * h * w * 4;
        if bytes.len() != need {
            return Err(Error::data(
                path,
                format!("payload is {} bytes, shape {c}x{h}x{w} needs {need}", bytes.len()),
            ));
        }
        let ds = out.get_or_insert_with(|| {
            Dataset::new(files.len(), c, h, w, format!("raw:{}", dir.display()))
        });
        if (ds.c, ds.h, ds.w) != (c, h, w) {
            return Err(Error::data(
                path,
                format!("shape {c}x{h}x{w} differs from first image {}x{}x{}", ds.c, ds.h, ds.w),
            ));
        }
        let img = ds.image_mut(i);
        for (j, (dst, src)) in img.iter_mut().zip(bytes[16..].chunks_exact(4)).enumerate() {
            let v = f32::from_le_bytes(src.try_into().unwrap());
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::data(
                    path,
                    format!("pixel {v} out of [0,1] at byte {}", 16 + j * 4),
                ));
            }
            *dst = v;
        }
    }
    Ok(out.expect("nonempty file list"))
}

/// Resolves the configured dataset into splits. `root` overrides the
/// config's directory (the CLI passes the data-root default through here).
pub fn load_splits(cfg: &DataCfg, root: Option<&Path>, seed: u64) -> Result<Splits> {
    match cfg.dataset.as_str() {
        "synth" => Ok(split_synth(synth_splits(cfg, seed), cfg)),
        "cifar10" => {
            let dir = match (&cfg.dir, root) {
                (Some(d), _) => PathBuf::from(d),
                (None, Some(r)) => r.join("cifar-10-batches-bin"),
                (None, None) => {
                    return Err(Error::config(
                        "cifar10 needs data.dir or a data root".to_string(),
                    ))
                }
            };
            load_cifar10(&dir, cfg, seed)
        }
        other => Err(Error::config(format!("unknown dataset {other:?}"))),
    }
}
