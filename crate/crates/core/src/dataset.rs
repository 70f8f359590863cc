//! Corpus manifests, pair sampling and the procedural multi-domain corpus.

use std::collections::{BTreeMap, HashSet};
use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domain {
    pub id: usize,
    pub name: String,
}

/// Ordered domain table with contiguous ids `0..N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainRegistry {
    domains: Vec<Domain>,
}

impl DomainRegistry {
    pub fn new(mut domains: Vec<Domain>) -> Result<Self> {
        domains.sort_by_key(|d| d.id);
        let mut names = HashSet::new();
        for (i, d) in domains.iter().enumerate() {
            if d.id != i {
                return Err(Error::MalformedManifest {
                    location: format!("domains[{i}]"),
                    message: format!("domain ids must be contiguous from 0, found {}", d.id),
                });
            }
            if !names.insert(d.name.clone()) {
                return Err(Error::MalformedManifest {
                    location: format!("domains[{i}]"),
                    message: format!("duplicate domain name `{}`", d.name),
                });
            }
        }
        Ok(Self { domains })
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.domains.get(id).map(|d| d.name.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub domain_id: usize,
    pub instance_id: usize,
    pub split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    domains: Vec<Domain>,
    samples: Vec<ManifestSample>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSample {
    path: String,
    domain_id: usize,
    instance_id: usize,
    split: Split,
}

/// Reads and validates a manifest. Relative sample paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<(DomainRegistry, Vec<SampleRecord>)> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::MalformedManifest {
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let registry = DomainRegistry::new(file.domains)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(file.samples.len());
    for s in file.samples {
        if s.domain_id >= registry.len() {
            return Err(Error::UnknownDomainId(s.domain_id));
        }
        if !seen.insert((s.domain_id, s.instance_id)) {
            return Err(Error::DuplicateSample { domain_id: s.domain_id, instance_id: s.instance_id });
        }
        let p = PathBuf::from(&s.path);
        let full = if p.is_absolute() { p } else { base.join(p) };
        if !full.is_file() {
            return Err(Error::MissingFile(full));
        }
        records.push(SampleRecord {
            path: full,
            domain_id: s.domain_id,
            instance_id: s.instance_id,
            split: s.split,
        });
    }
    Ok((registry, records))
}

/// Writes a manifest; sample paths under the manifest directory are stored
/// relative to it.
pub fn write_manifest(path: &Path, registry: &DomainRegistry, records: &[SampleRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let samples = records
        .iter()
        .map(|r| {
            let rel = r.path.strip_prefix(base).unwrap_or(&r.path);
            ManifestSample {
                path: rel.to_string_lossy().replace('\\', "/"),
                domain_id: r.domain_id,
                instance_id: r.instance_id,
                split: r.split,
            }
        })
        .collect();
    let file = ManifestFile { domains: registry.domains().to_vec(), samples };
    let text = serde_json::to_string_pretty(&file).expect("manifest serialises");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A manifest with every image decoded at one working resolution.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub registry: DomainRegistry,
    pub records: Vec<SampleRecord>,
    pub images: Vec<ImageTensor>,
}

impl Corpus {
    pub fn load(manifest: &Path, size: usize) -> Result<Self> {
        let (registry, records) = load_manifest(manifest)?;
        let images = records
            .iter()
            .map(|r| ImageTensor::load_png(&r.path, size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { registry, records, images })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn domain_indices(&self, domain: usize, split: Option<Split>) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| {
                let r = &self.records[i];
                r.domain_id == domain && split.is_none_or(|s| r.split == s)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRef {
    /// Index into the record list the sampler was built from.
    pub record: usize,
    pub domain_id: usize,
    pub instance_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairItem {
    pub content: SampleRef,
    pub style: SampleRef,
    /// Content and style are the identical sample (same domain and instance).
    pub same: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub items: Vec<PairItem>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn same_flags(&self) -> Vec<bool> {
        self.items.iter().map(|i| i.same).collect()
    }

    pub fn content_images<'a>(&self, images: &'a [ImageTensor]) -> Vec<&'a ImageTensor> {
        self.items.iter().map(|i| &images[i.content.record]).collect()
    }

    pub fn style_images<'a>(&self, images: &'a [ImageTensor]) -> Vec<&'a ImageTensor> {
        self.items.iter().map(|i| &images[i.style.record]).collect()
    }
}

/// Deterministic stream of content/style training pairs.
pub struct PairSampler {
    by_domain: Vec<Vec<usize>>,
    refs: Vec<SampleRef>,
    p_same: f64,
    rng: ChaCha8Rng,
}

impl PairSampler {
    pub fn new(records: &[SampleRecord], p_same: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_same) {
            return Err(Error::InvalidConfig(format!("p_same {p_same} outside [0, 1]")));
        }
        let mut grouped: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.split == Split::Train {
                grouped.entry(r.domain_id).or_default().push(i);
            }
        }
        if grouped.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let refs = records
            .iter()
            .enumerate()
            .map(|(i, r)| SampleRef { record: i, domain_id: r.domain_id, instance_id: r.instance_id })
            .collect();
        Ok(Self {
            by_domain: grouped.into_values().collect(),
            refs,
            p_same,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn draw(&mut self) -> SampleRef {
        let d = self.rng.random_range(0..self.by_domain.len());
        let pool = &self.by_domain[d];
        let i = pool[self.rng.random_range(0..pool.len())];
        self.refs[i]
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Result<PairBatch> {
        if batch_size == 0 {
            return Err(Error::InvalidBatchSize(batch_size));
        }
        let items = (0..batch_size)
            .map(|_| {
                let content = self.draw();
                let style = if self.rng.random::<f64>() < self.p_same { content } else { self.draw() };
                let same = content.domain_id == style.domain_id && content.instance_id == style.instance_id;
                PairItem { content, style, same }
            })
            .collect();
        Ok(PairBatch { items })
    }
}

/// One batch from a fresh sampler seeded with `seed`.
pub fn sample_pair_batch(records: &[SampleRecord], batch_size: usize, p_same: f64, seed: u64) -> Result<PairBatch> {
    PairSampler::new(records, p_same, seed)?.next_batch(batch_size)
}

const DOMAIN_NAMES: [&str; 13] = [
    "daytime", "night", "nir", "cartoon3d", "anime", "sculpture", "sketch", "opera", "exaggerated", "oil",
    "buddha", "avatar", "ancient",
];

/// Name used for synthetic domain `d`.
pub fn synthetic_domain_name(d: usize) -> String {
    DOMAIN_NAMES
        .get(d)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("domain_{d}"))
}

struct DomainLook {
    rgb: [f32; 3],
    freq: f32,
    angle: f32,
    amp: f32,
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn domain_look(d: usize, n: usize) -> DomainLook {
    DomainLook {
        rgb: hsv_to_rgb(d as f32 / n as f32, 0.65, 0.62 + 0.2 * ((d % 3) as f32 / 2.0)),
        freq: 3.0 + 2.0 * (d % 4) as f32,
        angle: PI * d as f32 / n as f32,
        amp: 0.12 + 0.04 * (d % 2) as f32,
    }
}

struct Blob {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    depth: f32,
}

/// Renders one synthetic face: a domain-specific tint and grating over a shared
/// face layout (oval plus 2-4 dark "facial" blobs placed per instance).
pub fn render_synthetic(d: usize, n_domains: usize, rng: &mut ChaCha8Rng, size: usize) -> ImageTensor {
    let look = domain_look(d, n_domains);
    let jitter = |rng: &mut ChaCha8Rng, s: f32| rng.random_range(-s..s);
    let oval = (0.5 + jitter(rng, 0.04), 0.52 + jitter(rng, 0.04), 0.30 + jitter(rng, 0.04), 0.38 + jitter(rng, 0.04));
    let count = rng.random_range(2..=4);
    let anchors = [(0.37, 0.43), (0.63, 0.43), (0.5, 0.72), (0.5, 0.58)];
    let blobs: Vec<Blob> = anchors[..count]
        .iter()
        .enumerate()
        .map(|(k, &(x, y))| {
            let mouth = k == 2;
            Blob {
                cx: x + jitter(rng, 0.06),
                cy: y + jitter(rng, 0.05),
                rx: if mouth { rng.random_range(0.09..0.15) } else { rng.random_range(0.05..0.09) },
                ry: if mouth { rng.random_range(0.03..0.06) } else { rng.random_range(0.04..0.08) },
                depth: rng.random_range(0.45..0.8),
            }
        })
        .collect();
    let (ca, sa) = (look.angle.cos(), look.angle.sin());
    let mut out = Array3::<f32>::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f32 + 0.5) / size as f32, (y as f32 + 0.5) / size as f32);
            let mut shade = 1.0 + look.amp * (2.0 * PI * look.freq * (u * ca + v * sa)).cos();
            let (ou, ov) = ((u - oval.0) / oval.2, (v - oval.1) / oval.3);
            let r2 = ou * ou + ov * ov;
            shade *= 0.75 + 0.45 * (-2.0 * r2 * r2).exp();
            for b in &blobs {
                let (bu, bv) = ((u - b.cx) / b.rx, (v - b.cy) / b.ry);
                shade *= 1.0 - b.depth * (-(bu * bu + bv * bv)).exp();
            }
            for ch in 0..3 {
                let val = (look.rgb[ch] * shade).clamp(0.0, 1.0);
                out[[ch, y, x]] = 2.0 * val - 1.0;
            }
        }
    }
    ImageTensor::new(out)
}

/// Number of trailing instances per domain assigned to the eval split.
pub fn eval_count(per_domain: usize) -> usize {
    per_domain / 4
}

/// Writes `n_domains * per_domain` PNGs plus `manifest.json` under `out_dir`
/// and returns the manifest path. Output bytes depend only on the arguments.
pub fn generate_synthetic_corpus(
    out_dir: &Path,
    n_domains: usize,
    per_domain: usize,
    size: usize,
    seed: u64,
) -> Result<PathBuf> {
    if n_domains < 2 || per_domain < 2 {
        return Err(Error::InvalidCounts(format!(
            "need >= 2 domains and >= 2 samples per domain, got {n_domains} x {per_domain}"
        )));
    }
    if size < 8 {
        return Err(Error::InvalidCounts(format!("image size {size} below 8")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let domains = (0..n_domains)
        .map(|d| Domain { id: d, name: synthetic_domain_name(d) })
        .collect();
    let registry = DomainRegistry::new(domains)?;
    let n_eval = eval_count(per_domain);
    let mut records = Vec::with_capacity(n_domains * per_domain);
    for d in 0..n_domains {
        for i in 0..per_domain {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((d * per_domain + i) as u64 + 1);
            let img = render_synthetic(d, n_domains, &mut rng, size);
            let path = out_dir.join(format!("{:02}_{}/{:03}.png", d, synthetic_domain_name(d), i));
            img.save_png(&path)?;
            records.push(SampleRecord {
                path,
                domain_id: d,
                instance_id: i,
                split: if i >= per_domain - n_eval { Split::Eval } else { Split::Train },
            });
        }
    }
    let manifest = out_dir.join("manifest.json");
    write_manifest(&manifest, &registry, &records)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{preprocess, Pixels, RawImage};

    fn registry(n: usize) -> DomainRegistry {
        DomainRegistry::new((0..n).map(|id| Domain { id, name: format!("d{id}") }).collect()).unwrap()
    }

    fn touch_manifest(dir: &Path, domains: usize, per: usize, extra: Option<(usize, usize)>) -> PathBuf {
        let mut samples = Vec::new();
        let mut push = |d: usize, i: usize| {
            let rel = format!("{d}_{i}.png");
            std::fs::write(dir.join(&rel), b"").unwrap();
            samples.push(serde_json::json!({"path": rel, "domain_id": d, "instance_id": i, "split": "train"}));
        };
        for d in 0..domains {
            for i in 0..per {
                push(d, i);
            }
        }
        if let Some((d, i)) = extra {
            push(d, i);
        }
        let doms: Vec<_> = (0..domains).map(|id| serde_json::json!({"id": id, "name": format!("d{id}")})).collect();
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::json!({"domains": doms, "samples": samples}).to_string()).unwrap();
        path
    }

    #[test]
    fn manifest_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (reg, recs) = load_manifest(&touch_manifest(dir.path(), 2, 3, None)).unwrap();
        assert_eq!(reg.len(), 2);
        assert_eq!(recs.len(), 6);
    }

    #[test]
    fn fs13_shaped_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let (reg, recs) = load_manifest(&touch_manifest(dir.path(), 13, 100, None)).unwrap();
        assert_eq!(reg.len(), 13);
        assert_eq!(recs.len(), 1300);
    }

    #[test]
    fn unknown_domain_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_manifest(&touch_manifest(dir.path(), 3, 1, Some((7, 0)))).unwrap_err();
        assert!(matches!(err, Error::UnknownDomainId(7)));
    }

    #[test]
    fn duplicate_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_manifest(&touch_manifest(dir.path(), 2, 2, Some((1, 1)))).unwrap_err();
        assert!(matches!(err, Error::DuplicateSample { domain_id: 1, instance_id: 1 }));
        assert!(matches!(load_manifest(&dir.path().join("nope.json")), Err(Error::MissingFile(_))));
        std::fs::write(dir.path().join("bad.json"), "{\"domains\": [").unwrap();
        assert!(matches!(
            load_manifest(&dir.path().join("bad.json")),
            Err(Error::MalformedManifest { .. })
        ));
    }

    #[test]
    fn registry_requires_contiguous_unique() {
        assert!(DomainRegistry::new(vec![Domain { id: 1, name: "a".into() }]).is_err());
        let dup = vec![Domain { id: 0, name: "a".into() }, Domain { id: 1, name: "a".into() }];
        assert!(DomainRegistry::new(dup).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (reg, recs) = load_manifest(&touch_manifest(dir.path(), 3, 2, None)).unwrap();
        let again = dir.path().join("copy.json");
        write_manifest(&again, &reg, &recs).unwrap();
        let (reg2, recs2) = load_manifest(&again).unwrap();
        assert_eq!(reg, reg2);
        assert_eq!(recs, recs2);
    }

    #[test]
    fn preprocess_resizes_and_normalises() {
        let raw = RawImage { width: 512, height: 512, channels: 3, pixels: Pixels::U8(vec![200; 512 * 512 * 3]) };
        let t = preprocess(&raw, 256).unwrap();
        assert_eq!(t.shape(), [3, 256, 256]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));

        let gray = RawImage { width: 4, height: 4, channels: 3, pixels: Pixels::U8(vec![128; 48]) };
        let g = preprocess(&gray, 4).unwrap();
        let expect = 2.0 * 128.0 / 255.0 - 1.0;
        assert!(g.data().iter().all(|v| (v - expect).abs() < 1e-6));
        assert!((expect - 0.0039).abs() < 1e-4);
    }

    #[test]
    fn preprocess_replicates_grayscale_and_rejects_bad_input() {
        let px: Vec<u8> = (0..16).map(|v| v * 10).collect();
        let raw = RawImage { width: 4, height: 4, channels: 1, pixels: Pixels::U8(px) };
        let t = preprocess(&raw, 4).unwrap();
        let d = t.data();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(d[[0, y, x]], d[[1, y, x]]);
                assert_eq!(d[[1, y, x]], d[[2, y, x]]);
            }
        }
        let empty = RawImage { width: 0, height: 3, channels: 3, pixels: Pixels::U8(vec![]) };
        assert!(matches!(preprocess(&empty, 4), Err(Error::EmptyImage)));
        let rgba = RawImage { width: 1, height: 1, channels: 4, pixels: Pixels::U8(vec![0; 4]) };
        assert!(matches!(preprocess(&rgba, 4), Err(Error::UnsupportedChannelCount(4))));
    }

    fn records(domains: usize, per: usize) -> Vec<SampleRecord> {
        (0..domains)
            .flat_map(|d| {
                (0..per).map(move |i| SampleRecord {
                    path: PathBuf::from(format!("{d}/{i}.png")),
                    domain_id: d,
                    instance_id: i,
                    split: Split::Train,
                })
            })
            .collect()
    }

    #[test]
    fn pair_sampling_contracts() {
        let recs = records(3, 5);
        let all_same = sample_pair_batch(&recs, 16, 1.0, 3).unwrap();
        assert!(all_same.same_flags().iter().all(|&s| s));
        let a = sample_pair_batch(&recs, 8, 0.0, 11).unwrap();
        let b = sample_pair_batch(&recs, 8, 0.0, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(sample_pair_batch(&recs, 4, 0.2, 0).unwrap().len(), 4);
        for item in &a.items {
            let ids_match = item.content.domain_id == item.style.domain_id
                && item.content.instance_id == item.style.instance_id;
            assert_eq!(item.same, ids_match);
        }
        assert!(matches!(sample_pair_batch(&recs, 0, 0.2, 0), Err(Error::InvalidBatchSize(0))));
        assert!(matches!(sample_pair_batch(&[], 4, 0.2, 0), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn same_fraction_converges_to_p_same() {
        // 40 instances per domain keep accidental identical draws rare.
        let recs = records(4, 40);
        let mut sampler = PairSampler::new(&recs, 0.3, 5).unwrap();
        let batch = sampler.next_batch(10_000).unwrap();
        let frac = batch.items.iter().filter(|i| i.same).count() as f64 / 10_000.0;
        // Accidental matches add about (1 - p) / 160.
        assert!((frac - 0.3).abs() <= 0.02, "fraction {frac}");
    }

    #[test]
    fn synthetic_corpus_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let m1 = generate_synthetic_corpus(&dir.path().join("a"), 4, 16, 64, 7).unwrap();
        let m2 = generate_synthetic_corpus(&dir.path().join("b"), 4, 16, 64, 7).unwrap();
        let (reg, recs) = load_manifest(&m1).unwrap();
        assert_eq!(reg.len(), 4);
        assert_eq!(recs.len(), 64);
        let (_, recs2) = load_manifest(&m2).unwrap();
        for (a, b) in recs.iter().zip(&recs2) {
            assert_eq!(std::fs::read(&a.path).unwrap(), std::fs::read(&b.path).unwrap());
        }
        assert!(matches!(
            generate_synthetic_corpus(dir.path(), 1, 4, 64, 0),
            Err(Error::InvalidCounts(_))
        ));
        let _ = registry(1);
    }

    #[test]
    fn mean_colour_separates_synthetic_domains() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_corpus(dir.path(), 4, 16, 64, 3).unwrap();
        let corpus = Corpus::load(&m, 64).unwrap();
        // Closed-form least squares onto one-hot targets over [1, mean r, g, b].
        let n = corpus.images.len();
        let x = nalgebra::DMatrix::from_fn(n, 4, |i, j| {
            if j == 0 {
                1.0
            } else {
                corpus.images[i].data().index_axis(ndarray::Axis(0), j - 1).mean().unwrap() as f64
            }
        });
        let y = nalgebra::DMatrix::from_fn(n, 4, |i, k| if corpus.records[i].domain_id == k { 1.0 } else { 0.0 });
        let w = (x.transpose() * &x).lu().solve(&(x.transpose() * &y)).unwrap();
        let pred = x * w;
        let hits = (0..n).filter(|&i| pred.row(i).transpose().argmax().0 == corpus.records[i].domain_id).count();
        assert!(hits as f64 / n as f64 >= 0.95, "{hits}/{n}");
    }
}
