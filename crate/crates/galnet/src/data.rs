//! Datasets: synthetic planted-correlation generation, a loader for
//! list-style attribute annotation files, flip augmentation, and the raw
//! image container / portable graymap formats used for fixtures.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;
use crate::{Error, Result};

// ── Labels ───────────────────────────────────────────────────────────

/// Dense binary label matrix, row-major `[rows × cols]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<u8>,
}

impl LabelMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<u8>) -> Result<LabelMatrix> {
        if values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "label matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(&bad) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Contract(format!("labels must be 0 or 1, found {bad}")));
        }
        Ok(LabelMatrix { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> LabelMatrix {
        LabelMatrix {
            rows,
            cols,
            values: vec![0; rows * cols],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.values[row * self.cols + col] = v;
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    /// Row subset in order, for batch assembly.
    pub fn gather_rows(&self, rows: &[usize]) -> LabelMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        LabelMatrix {
            rows: rows.len(),
            cols: self.cols,
            values,
        }
    }
}

// ── Dataset ──────────────────────────────────────────────────────────

/// Images `[N,H,W,C]` with M binary attribute labels per image.
pub struct Dataset {
    pub images: Tensor,
    pub labels: LabelMatrix,
    pub attribute_names: Vec<String>,
    /// Attribute pairs sharing a latent factor, when known (synthetic data).
    pub ground_truth_pairs: Option<Vec<(usize, usize)>>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn m(&self) -> usize {
        self.labels.cols
    }

    /// (H, W, C)
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image_row(&self, index: usize) -> Vec<f64> {
        let (h, w, c) = self.image_dims();
        let stride = h * w * c;
        self.images.values()[index * stride..(index + 1) * stride].to_vec()
    }

    /// Splits off the first `n` samples; the remainder forms the second set.
    pub fn split(self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.n() {
            return Err(Error::Contract(format!(
                "split point {n} outside dataset of {} samples",
                self.n()
            )));
        }
        let (h, w, c) = self.image_dims();
        let stride = h * w * c;
        let v = self.images.to_vec();
        let first = Tensor::new(&[n, h, w, c], v[..n * stride].to_vec())?;
        let rest_n = self.n() - n;
        let second = Tensor::new(&[rest_n, h, w, c], v[n * stride..].to_vec())?;
        let m = self.m();
        let lv = &self.labels.values;
        Ok((
            Dataset {
                images: first,
                labels: LabelMatrix::new(n, m, lv[..n * m].to_vec())?,
                attribute_names: self.attribute_names.clone(),
                ground_truth_pairs: self.ground_truth_pairs.clone(),
            },
            Dataset {
                images: second,
                labels: LabelMatrix::new(rest_n, m, lv[n * m..].to_vec())?,
                attribute_names: self.attribute_names,
                ground_truth_pairs: self.ground_truth_pairs,
            },
        ))
    }
}

// ── Synthetic generation ─────────────────────────────────────────────

/// Planted-correlation dataset parameters. Attributes mapping to the same
/// latent factor are correlated with agreement probability
/// `(1-ε)² + ε²` where ε is the label noise.
#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub m: usize,
    /// latent factor count, K <= M
    pub k: usize,
    /// attribute index -> factor index, length M
    pub factor_map: Vec<usize>,
    /// label noise ε in [0, 0.5)
    pub label_noise: f64,
    /// (H, W); images are single-channel
    pub image: (usize, usize),
    pub n_train: usize,
    pub n_eval: usize,
    pub render_contrast: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            m: 8,
            k: 4,
            factor_map: vec![0, 0, 1, 1, 2, 2, 3, 3],
            label_noise: 0.1,
            image: (32, 32),
            n_train: 4000,
            n_eval: 1000,
            render_contrast: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config(format!("m: need at least 2 attributes, got {}", self.m)));
        }
        if self.k == 0 || self.k > self.m {
            return Err(Error::Config(format!("k: need 1 <= k <= m, got k={} m={}", self.k, self.m)));
        }
        if self.factor_map.len() != self.m {
            return Err(Error::Config(format!(
                "factor_map: expected {} entries, got {}",
                self.m,
                self.factor_map.len()
            )));
        }
        if let Some(&bad) = self.factor_map.iter().find(|&&f| f >= self.k) {
            return Err(Error::Config(format!(
                "factor_map: factor index {bad} out of range for k={}",
                self.k
            )));
        }
        for f in 0..self.k {
            if !self.factor_map.contains(&f) {
                return Err(Error::Config(format!("factor_map: factor {f} has no attribute")));
            }
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::Config(format!(
                "label_noise: must lie in [0, 0.5), got {}",
                self.label_noise
            )));
        }
        if self.image.0 == 0 || self.image.1 == 0 {
            return Err(Error::Config("image: dimensions must be positive".into()));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::Config("n_train/n_eval: must be positive".into()));
        }
        if self.render_contrast <= 0.0 {
            return Err(Error::Config(format!(
                "render_contrast: must be positive, got {}",
                self.render_contrast
            )));
        }
        Ok(())
    }

    /// Same-factor attribute pairs (i < j).
    pub fn planted_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for i in 0..self.m {
            for j in i + 1..self.m {
                if self.factor_map[i] == self.factor_map[j] {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }
}

/// Generates `n_train + n_eval` samples; callers split off the leading
/// `n_train` for training. Each sample draws K fair-coin factors; label j
/// is its factor's coin XOR Bernoulli(ε). The image is K horizontal
/// bands, band k rendered at ±`render_contrast` by factor k plus 0.25×
/// standard-normal pixel noise.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (h, w) = cfg.image;
    let n = cfg.n_train + cfg.n_eval;
    let mut rng = crate::model::component_rng(cfg.seed, "synthetic-data");
    let normal = StandardNormal;
    // row -> band index
    let band_of_row: Vec<usize> = (0..h).map(|r| (r * cfg.k) / h).collect();
    let mut images = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n * cfg.m);
    let mut factors = vec![false; cfg.k];
    for _ in 0..n {
        for f in factors.iter_mut() {
            *f = rng.random::<bool>();
        }
        for j in 0..cfg.m {
            let flip = rng.random::<f64>() < cfg.label_noise;
            let bit = factors[cfg.factor_map[j]] ^ flip;
            labels.push(bit as u8);
        }
        for row in 0..h {
            let base = if factors[band_of_row[row]] {
                cfg.render_contrast
            } else {
                -cfg.render_contrast
            };
            for _ in 0..w {
                let noise: f64 = normal.sample(&mut rng);
                images.push(base + 0.25 * noise);
            }
        }
    }
    let attribute_names = (0..cfg.m)
        .map(|j| format!("attr{j}_f{}", cfg.factor_map[j]))
        .collect();
    Ok(Dataset {
        images: Tensor::new(&[n, h, w, 1], images)?,
        labels: LabelMatrix::new(n, cfg.m, labels)?,
        attribute_names,
        ground_truth_pairs: Some(cfg.planted_pairs()),
    })
}

// ── Flip augmentation ────────────────────────────────────────────────

pub(crate) fn flip_w_in_place(buf: &mut [f64], h: usize, w: usize, c: usize) {
    for row in 0..h {
        for col in 0..w / 2 {
            let mirror = w - 1 - col;
            for ch in 0..c {
                buf.swap((row * w + col) * c + ch, (row * w + mirror) * c + ch);
            }
        }
    }
}

/// With probability 0.5, reverses the width axis of an `[H,W,C]` image.
pub fn random_flip<R: Rng>(image: &Tensor, rng: &mut R) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!(
            "random_flip expects [H,W,C], got {s:?}"
        )));
    }
    let mut v = image.to_vec();
    if rng.random::<bool>() {
        flip_w_in_place(&mut v, s[0], s[1], s[2]);
    }
    Tensor::new(s, v)
}

// ── Annotation files ─────────────────────────────────────────────────

/// Writes the list-style annotation format: sample count, attribute
/// names, then one `filename v1 .. vM` line per image with values ±1.
pub fn save_annotations(
    path: impl AsRef<Path>,
    names: &[String],
    labels: &LabelMatrix,
    filenames: &[String],
) -> Result<()> {
    let path = path.as_ref();
    if filenames.len() != labels.rows {
        return Err(Error::Contract(format!(
            "save_annotations: {} filenames for {} label rows",
            filenames.len(),
            labels.rows
        )));
    }
    if names.len() != labels.cols {
        return Err(Error::Contract(format!(
            "save_annotations: {} names for {} label columns",
            names.len(),
            labels.cols
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let werr = |e| Error::io(path.display().to_string(), e);
    writeln!(out, "{}", labels.rows).map_err(werr)?;
    writeln!(out, "{}", names.join(" ")).map_err(werr)?;
    for (i, fname) in filenames.iter().enumerate() {
        let row: Vec<String> = labels
            .row(i)
            .iter()
            .map(|&v| if v == 1 { "1".to_string() } else { "-1".to_string() })
            .collect();
        writeln!(out, "{} {}", fname, row.join(" ")).map_err(werr)?;
    }
    Ok(())
}

/// Parses the annotation format back into names, filenames, and 0/1 labels
/// (file value -1 maps to 0). Errors carry the offending line number.
pub fn parse_annotations(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<String>, LabelMatrix)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let mut next_line = |expect: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((i, Err(e))) => Err(Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            }),
            None => Err(Error::Parse {
                line: 0,
                msg: format!("unexpected end of file, expected {expect}"),
            }),
        }
    };
    let (count_line_no, count_line) = next_line("sample count")?;
    let n: usize = count_line.trim().parse().map_err(|_| Error::Parse {
        line: count_line_no,
        msg: format!("invalid sample count '{}'", count_line.trim()),
    })?;
    let (_, names_line) = next_line("attribute names")?;
    let names: Vec<String> = names_line.split_whitespace().map(str::to_string).collect();
    if names.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "no attribute names".into(),
        });
    }
    let mut uniq = std::collections::HashSet::new();
    for n in &names {
        if !uniq.insert(n) {
            return Err(Error::Parse {
                line: 2,
                msg: format!("duplicate attribute name '{n}'"),
            });
        }
    }
    let m = names.len();
    let mut filenames = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n * m);
    for _ in 0..n {
        let (line_no, line) = next_line("annotation row")?;
        let mut fields = line.split_whitespace();
        let fname = fields.next().ok_or_else(|| Error::Parse {
            line: line_no,
            msg: "empty annotation row".into(),
        })?;
        let row: Vec<&str> = fields.collect();
        if row.len() != m {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {m} attribute values, found {}", row.len()),
            });
        }
        for v in row {
            match v {
                "1" => values.push(1),
                "-1" => values.push(0),
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("attribute value must be 1 or -1, found '{other}'"),
                    })
                }
            }
        }
        filenames.push(fname.to_string());
    }
    Ok((names, filenames, LabelMatrix::new(n, m, values)?))
}

// ── Portable graymap fixtures ────────────────────────────────────────

/// Writes an ASCII (P2) graymap with maxval 255.
pub fn write_pgm_p2(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if pixels.len() != width * height {
        return Err(Error::Contract(format!(
            "write_pgm_p2: {width}x{height} needs {} pixels, got {}",
            width * height,
            pixels.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let werr = |e| Error::io(path.display().to_string(), e);
    writeln!(out, "P2").map_err(werr)?;
    writeln!(out, "{width} {height}").map_err(werr)?;
    writeln!(out, "255").map_err(werr)?;
    for row in pixels.chunks(width) {
        let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
        writeln!(out, "{}", line.join(" ")).map_err(werr)?;
    }
    Ok(())
}

/// Reads a P2 or P5 graymap; returns (height, width, values scaled to [0,1]).
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let parse_err = |msg: String| Error::Parse { line: 1, msg };
    if raw.len() < 2 {
        return Err(parse_err("file too short for a graymap header".into()));
    }
    let magic = &raw[0..2];
    let is_ascii = magic == b"P2";
    if !is_ascii && magic != b"P5" {
        return Err(parse_err("expected P2 or P5 graymap magic".into()));
    }
    // header tokens: width, height, maxval; comments start with '#'
    let mut pos = 2usize;
    let mut tokens = Vec::new();
    while tokens.len() < 3 && pos < raw.len() {
        while pos < raw.len() && (raw[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < raw.len() && !(raw[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos > start {
            tokens.push(String::from_utf8_lossy(&raw[start..pos]).to_string());
        }
    }
    if tokens.len() < 3 {
        return Err(parse_err("incomplete graymap header".into()));
    }
    let width: usize = tokens[0].parse().map_err(|_| parse_err(format!("bad width '{}'", tokens[0])))?;
    let height: usize = tokens[1].parse().map_err(|_| parse_err(format!("bad height '{}'", tokens[1])))?;
    let maxval: f64 = tokens[2].parse().map_err(|_| parse_err(format!("bad maxval '{}'", tokens[2])))?;
    if maxval <= 0.0 {
        return Err(parse_err("maxval must be positive".into()));
    }
    let n = width * height;
    let mut values = Vec::with_capacity(n);
    if is_ascii {
        let body = String::from_utf8_lossy(&raw[pos..]);
        for tok in body.split_whitespace().take(n) {
            let v: f64 = tok.parse().map_err(|_| parse_err(format!("bad pixel '{tok}'")))?;
            values.push(v / maxval);
        }
    } else {
        pos += 1; // single whitespace after maxval
        if raw.len() < pos + n {
            return Err(parse_err("binary graymap body truncated".into()));
        }
        values.extend(raw[pos..pos + n].iter().map(|&b| b as f64 / maxval));
    }
    if values.len() != n {
        return Err(parse_err(format!("expected {n} pixels, found {}", values.len())));
    }
    Ok((height, width, values))
}

fn resize_nearest(src: &[f64], sh: usize, sw: usize, th: usize, tw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let sy = (y * sh) / th;
        for x in 0..tw {
            let sx = (x * sw) / tw;
            out.push(src[sy * sw + sx]);
        }
    }
    out
}

/// Loads graymap images named by an annotation file, resized to
/// `(target_h, target_w)` with pixel values in [0,1].
pub fn load_attribute_dataset(
    image_dir: impl AsRef<Path>,
    annotation_file: impl AsRef<Path>,
    target: (usize, usize),
) -> Result<Dataset> {
    let (names, filenames, labels) = parse_annotations(&annotation_file)?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Config("target image dims must be positive".into()));
    }
    let dir = image_dir.as_ref();
    let mut images = Vec::with_capacity(filenames.len() * th * tw);
    for fname in &filenames {
        let path = dir.join(fname);
        let (h, w, vals) = read_pgm(&path)?;
        images.extend(resize_nearest(&vals, h, w, th, tw));
    }
    Ok(Dataset {
        images: Tensor::new(&[filenames.len(), th, tw, 1], images)?,
        labels,
        attribute_names: names,
        ground_truth_pairs: None,
    })
}

// ── Raw image container ──────────────────────────────────────────────

const CONTAINER_MAGIC: u32 = u32::from_le_bytes(*b"GALD");
const CONTAINER_VERSION: u16 = 1;

/// 16-byte header (magic, version, N, H, W, C, all little-endian)
/// followed by N·H·W·C little-endian f64 values.
pub fn save_image_container(path: impl AsRef<Path>, images: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Contract(format!(
            "image container expects [N,H,W,C], got {s:?}"
        )));
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    if n > u32::MAX as usize || h > u16::MAX as usize || w > u16::MAX as usize || c > u16::MAX as usize {
        return Err(Error::Contract("image container dims exceed header field range".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let werr = |e| Error::io(path.display().to_string(), e);
    out.write_all(&CONTAINER_MAGIC.to_le_bytes()).map_err(werr)?;
    out.write_all(&CONTAINER_VERSION.to_le_bytes()).map_err(werr)?;
    out.write_all(&(n as u32).to_le_bytes()).map_err(werr)?;
    out.write_all(&(h as u16).to_le_bytes()).map_err(werr)?;
    out.write_all(&(w as u16).to_le_bytes()).map_err(werr)?;
    out.write_all(&(c as u16).to_le_bytes()).map_err(werr)?;
    for v in images.values().iter() {
        out.write_all(&v.to_le_bytes()).map_err(werr)?;
    }
    Ok(())
}

pub fn load_image_container(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let perr = |msg: String| Error::Parse { line: 1, msg };
    if raw.len() < 16 {
        return Err(perr("container shorter than its 16-byte header".into()));
    }
    let magic = u32::from_le_bytes(raw[0..4].try_into().unwrap());
    if magic != CONTAINER_MAGIC {
        return Err(perr("bad container magic".into()));
    }
    let version = u16::from_le_bytes(raw[4..6].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(perr(format!("unsupported container version {version}")));
    }
    let n = u32::from_le_bytes(raw[6..10].try_into().unwrap()) as usize;
    let h = u16::from_le_bytes(raw[10..12].try_into().unwrap()) as usize;
    let w = u16::from_le_bytes(raw[12..14].try_into().unwrap()) as usize;
    let c = u16::from_le_bytes(raw[14..16].try_into().unwrap()) as usize;
    let count = n * h * w * c;
    if raw.len() != 16 + count * 8 {
        return Err(perr(format!(
            "container body has {} bytes, header implies {}",
            raw.len() - 16,
            count * 8
        )));
    }
    let values: Vec<f64> = raw[16..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(&[n, h, w, c], values)
}

/// Loads a container + annotation pair written by `save_dataset`; images
/// and label rows correspond by order.
pub fn load_dataset(
    images_path: impl AsRef<Path>,
    annotations_path: impl AsRef<Path>,
) -> Result<Dataset> {
    let images = load_image_container(images_path)?;
    let (names, _filenames, labels) = parse_annotations(annotations_path)?;
    if images.shape()[0] != labels.rows {
        return Err(Error::Contract(format!(
            "container has {} images but annotations have {} rows",
            images.shape()[0],
            labels.rows
        )));
    }
    Ok(Dataset {
        images,
        labels,
        attribute_names: names,
        ground_truth_pairs: None,
    })
}

pub fn save_dataset(
    dataset: &Dataset,
    images_path: impl AsRef<Path>,
    annotations_path: impl AsRef<Path>,
) -> Result<()> {
    save_image_container(images_path, &dataset.images)?;
    let filenames: Vec<String> = (0..dataset.n()).map(|i| format!("sample{i:06}")).collect();
    save_annotations(
        annotations_path,
        &dataset.attribute_names,
        &dataset.labels,
        &filenames,
    )
}
