//! SLIC superpixel segmentation in CIELAB.
//!
//! Classic SLIC with a fixed iteration count: seeds on a regular grid with
//! spacing `g = sqrt(H*W / n)`, perturbed to the lowest-gradient pixel in a
//! 3x3 neighborhood, assignment within a 2g x 2g window per center under
//! `d = d_lab + (compactness / g) * d_xy`, then connectivity enforcement that
//! merges orphan components into the largest adjacent segment. There is no
//! randomness anywhere; the assignment step is a pure per-pixel map, so the
//! result is independent of thread scheduling.

use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::image_io::RgbImage;
use crate::parallel::map_indexed;

pub const VQFS_MAGIC: &[u8; 4] = b"VQFS";
pub const VQFS_VERSION: u32 = 1;

/// Per-pixel superpixel labels. Labels are dense in `[0, num_segments)`,
/// every label is used, and each label's pixel set is 4-connected.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub num_segments: usize,
    /// Compactness the segmentation was produced with.
    pub compactness: f32,
    /// Superpixel count that was requested.
    pub requested: usize,
}

impl Segmentation {
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.height * self.width {
            return Err(Error::invalid("label grid does not match dims"));
        }
        let mut used = vec![false; self.num_segments];
        for &l in &self.labels {
            let l = l as usize;
            if l >= self.num_segments {
                return Err(Error::invalid(format!(
                    "label {l} out of range 0..{}",
                    self.num_segments
                )));
            }
            used[l] = true;
        }
        if !used.iter().all(|&u| u) {
            return Err(Error::invalid("some labels in range are unused"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_vqfs(path, self.height, self.width, self.num_segments, &self.labels)
    }

    pub fn load(path: &Path) -> Result<Segmentation> {
        let (height, width, num_segments, labels) = read_vqfs(path)?;
        let seg = Segmentation {
            height,
            width,
            labels,
            num_segments,
            compactness: 0.0,
            requested: num_segments,
        };
        seg.validate()?;
        Ok(seg)
    }
}

pub fn write_vqfs(
    path: &Path,
    height: usize,
    width: usize,
    num_segments: usize,
    labels: &[u32],
) -> Result<()> {
    assert_eq!(labels.len(), height * width, "label grid disagrees with dims");
    let mut w = ByteWriter::new();
    w.push_magic(VQFS_MAGIC);
    w.push_u32(VQFS_VERSION);
    w.push_u32(height as u32);
    w.push_u32(width as u32);
    w.push_u32(num_segments as u32);
    w.push_u32_slice(labels);
    w.write_file(path)
}

pub fn read_vqfs(path: &Path) -> Result<(usize, usize, usize, Vec<u32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, Some(path));
    r.expect_magic(VQFS_MAGIC)?;
    let version = r.read_u32("version")?;
    if version != VQFS_VERSION {
        return Err(Error::format(
            Some(path.to_path_buf()),
            4,
            format!("unsupported VQFS version {version}"),
        ));
    }
    let h = r.read_u32("height")? as usize;
    let w = r.read_u32("width")? as usize;
    let num_segments = r.read_u32("num_segments")? as usize;
    let labels = r.read_u32_vec(h * w, "labels")?;
    r.finish()?;
    Ok((h, w, num_segments, labels))
}

/// Per-segment pixel counts plus the number of boundary pixels (pixels with a
/// 4-neighbor carrying a different label).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentStats {
    pub sizes: Vec<usize>,
    pub boundary_pixels: usize,
}

pub fn segment_stats(seg: &Segmentation) -> SegmentStats {
    let mut sizes = vec![0usize; seg.num_segments];
    for &l in &seg.labels {
        sizes[l as usize] += 1;
    }
    let (h, w) = (seg.height, seg.width);
    let mut boundary = 0usize;
    for r in 0..h {
        for c in 0..w {
            let l = seg.labels[r * w + c];
            let differs = (r > 0 && seg.labels[(r - 1) * w + c] != l)
                || (r + 1 < h && seg.labels[(r + 1) * w + c] != l)
                || (c > 0 && seg.labels[r * w + c - 1] != l)
                || (c + 1 < w && seg.labels[r * w + c + 1] != l);
            if differs {
                boundary += 1;
            }
        }
    }
    SegmentStats {
        sizes,
        boundary_pixels: boundary,
    }
}

#[derive(Clone, Copy)]
struct Center {
    l: f32,
    a: f32,
    b: f32,
    row: f32,
    col: f32,
}

/// SLIC segmentation of an RGB image into roughly `n_superpixels` segments.
pub fn slic_segment(
    image: &RgbImage,
    n_superpixels: usize,
    compactness: f32,
    max_iters: usize,
) -> Result<Segmentation> {
    let (h, w) = (image.height, image.width);
    let pixels = h * w;
    if n_superpixels < 1 || n_superpixels > pixels {
        return Err(Error::invalid(format!(
            "n_superpixels must be in [1, {pixels}], got {n_superpixels}"
        )));
    }
    if max_iters < 1 {
        return Err(Error::invalid("max_iters must be >= 1"));
    }
    if !(compactness >= 0.0) {
        return Err(Error::invalid("compactness must be >= 0"));
    }

    let lab = rgb_to_lab(image);
    let g = ((pixels as f64) / (n_superpixels as f64)).sqrt();
    let rows = ((h as f64 / g).round() as usize).max(1);
    let cols = ((w as f64 / g).round() as usize).max(1);

    let mut centers: Vec<Center> = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let mut r = (((i as f64 + 0.5) * h as f64 / rows as f64) as usize).min(h - 1);
            let mut c = (((j as f64 + 0.5) * w as f64 / cols as f64) as usize).min(w - 1);
            // Gradient perturbation is meaningless once seeds are (nearly)
            // per-pixel dense.
            if g >= 2.0 {
                (r, c) = lowest_gradient_neighbor(&lab, h, w, r, c);
            }
            let p = r * w + c;
            centers.push(Center {
                l: lab[p * 3],
                a: lab[p * 3 + 1],
                b: lab[p * 3 + 2],
                row: r as f32,
                col: c as f32,
            });
        }
    }

    // Initial labels from the seed grid so every pixel is always assigned.
    let mut labels: Vec<u32> = (0..pixels)
        .map(|p| {
            let (r, c) = (p / w, p % w);
            let i = (r * rows / h).min(rows - 1);
            let j = (c * cols / w).min(cols - 1);
            (i * cols + j) as u32
        })
        .collect();

    let spatial_weight = (f64::from(compactness) / g) as f32;
    let window = g as f32;
    let bucket_size = g.max(1.0);
    let bucket_cols = ((w as f64 / bucket_size).ceil() as usize).max(1);
    let bucket_rows = ((h as f64 / bucket_size).ceil() as usize).max(1);

    for _ in 0..max_iters {
        // Bucket centers so each pixel only inspects nearby candidates.
        let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); bucket_rows * bucket_cols];
        for (k, ctr) in centers.iter().enumerate() {
            let br = ((ctr.row as f64 / bucket_size) as usize).min(bucket_rows - 1);
            let bc = ((ctr.col as f64 / bucket_size) as usize).min(bucket_cols - 1);
            buckets[br * bucket_cols + bc].push(k as u32);
        }

        let new_labels: Vec<u32> = map_indexed(pixels, |p| {
            let (r, c) = ((p / w) as f32, (p % w) as f32);
            let (pl, pa, pb) = (lab[p * 3], lab[p * 3 + 1], lab[p * 3 + 2]);
            let br = ((r as f64 / bucket_size) as usize).min(bucket_rows - 1);
            let bc = ((c as f64 / bucket_size) as usize).min(bucket_cols - 1);
            let mut best = f32::INFINITY;
            let mut best_k = labels[p];
            for nbr in br.saturating_sub(1)..=(br + 1).min(bucket_rows - 1) {
                for nbc in bc.saturating_sub(1)..=(bc + 1).min(bucket_cols - 1) {
                    for &k in &buckets[nbr * bucket_cols + nbc] {
                        let ctr = &centers[k as usize];
                        let dr = r - ctr.row;
                        let dc = c - ctr.col;
                        if dr.abs() > window || dc.abs() > window {
                            continue;
                        }
                        let dl = pl - ctr.l;
                        let da = pa - ctr.a;
                        let db = pb - ctr.b;
                        let d_lab = (dl * dl + da * da + db * db).sqrt();
                        let d_xy = (dr * dr + dc * dc).sqrt();
                        let d = d_lab + spatial_weight * d_xy;
                        if d < best || (d == best && k < best_k) {
                            best = d;
                            best_k = k;
                        }
                    }
                }
            }
            best_k
        });

        let changed = new_labels != labels;
        labels = new_labels;

        // Serial center update in row-major pixel order keeps sums deterministic.
        let mut sums = vec![[0.0f64; 5]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for p in 0..pixels {
            let k = labels[p] as usize;
            sums[k][0] += f64::from(lab[p * 3]);
            sums[k][1] += f64::from(lab[p * 3 + 1]);
            sums[k][2] += f64::from(lab[p * 3 + 2]);
            sums[k][3] += (p / w) as f64;
            sums[k][4] += (p % w) as f64;
            counts[k] += 1;
        }
        for (k, ctr) in centers.iter_mut().enumerate() {
            if counts[k] > 0 {
                let n = counts[k] as f64;
                ctr.l = (sums[k][0] / n) as f32;
                ctr.a = (sums[k][1] / n) as f32;
                ctr.b = (sums[k][2] / n) as f32;
                ctr.row = (sums[k][3] / n) as f32;
                ctr.col = (sums[k][4] / n) as f32;
            }
        }

        if !changed {
            break;
        }
    }

    let (labels, num_segments) = enforce_connectivity(labels, h, w);
    let seg = Segmentation {
        height: h,
        width: w,
        labels,
        num_segments,
        compactness,
        requested: n_superpixels,
    };
    debug_assert!(seg.validate().is_ok());
    Ok(seg)
}

/// Move a seed to the lowest-gradient pixel in its 3x3 neighborhood
/// (row-major first occurrence on ties).
fn lowest_gradient_neighbor(lab: &[f32], h: usize, w: usize, r: usize, c: usize) -> (usize, usize) {
    let grad = |r: usize, c: usize| -> f32 {
        let at = |rr: usize, cc: usize| {
            let p = rr * w + cc;
            [lab[p * 3], lab[p * 3 + 1], lab[p * 3 + 2]]
        };
        let xm = at(r, c.saturating_sub(1));
        let xp = at(r, (c + 1).min(w - 1));
        let ym = at(r.saturating_sub(1), c);
        let yp = at((r + 1).min(h - 1), c);
        let mut gsum = 0.0f32;
        for k in 0..3 {
            let gx = xp[k] - xm[k];
            let gy = yp[k] - ym[k];
            gsum += gx * gx + gy * gy;
        }
        gsum
    };
    let mut best = (r, c);
    let mut best_g = f32::INFINITY;
    for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
        for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
            let g = grad(rr, cc);
            if g < best_g {
                best_g = g;
                best = (rr, cc);
            }
        }
    }
    best
}

/// Re-label so that every label's pixel set is 4-connected: the largest
/// component of each label keeps it, every other component merges into the
/// largest adjacent segment. Returns dense labels and the segment count.
fn enforce_connectivity(labels: Vec<u32>, h: usize, w: usize) -> (Vec<u32>, usize) {
    let pixels = h * w;
    let mut comp_of = vec![u32::MAX; pixels];
    let mut comp_label: Vec<u32> = Vec::new();
    let mut comp_pixels: Vec<Vec<u32>> = Vec::new();

    let mut stack = Vec::new();
    for start in 0..pixels {
        if comp_of[start] != u32::MAX {
            continue;
        }
        let comp = comp_label.len() as u32;
        let label = labels[start];
        comp_label.push(label);
        let mut members = Vec::new();
        comp_of[start] = comp;
        stack.push(start as u32);
        while let Some(p) = stack.pop() {
            members.push(p);
            let (r, c) = (p as usize / w, p as usize % w);
            let mut visit = |q: usize| {
                if comp_of[q] == u32::MAX && labels[q] == label {
                    comp_of[q] = comp;
                    stack.push(q as u32);
                }
            };
            if r > 0 {
                visit(p as usize - w);
            }
            if r + 1 < h {
                visit(p as usize + w);
            }
            if c > 0 {
                visit(p as usize - 1);
            }
            if c + 1 < w {
                visit(p as usize + 1);
            }
        }
        comp_pixels.push(members);
    }

    // The largest component of each label survives; ties go to the earliest
    // component in scan order.
    let num_labels = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let mut keeper: Vec<Option<u32>> = vec![None; num_labels];
    for (comp, members) in comp_pixels.iter().enumerate() {
        let label = comp_label[comp] as usize;
        match keeper[label] {
            Some(k) if comp_pixels[k as usize].len() >= members.len() => {}
            _ => keeper[label] = Some(comp as u32),
        }
    }

    // Final label per pixel; orphan merging rewrites these.
    let mut out = labels;
    let mut seg_size = vec![0usize; num_labels];
    for &l in out.iter() {
        seg_size[l as usize] += 1;
    }

    // Merge orphans into the largest adjacent *settled* segment (a keeper or
    // an already-merged component), so a target label can never be left
    // disconnected by a later merge. An orphan whose settled neighbor already
    // carries the orphan's own label is connected through it and settles in
    // place. Since settled pixels always border some pending orphan, every
    // pass makes progress; scan order is fixed, so the result is
    // deterministic.
    let mut settled: Vec<bool> = (0..comp_pixels.len())
        .map(|comp| keeper[comp_label[comp] as usize] == Some(comp as u32))
        .collect();
    let mut pending: Vec<usize> = (0..comp_pixels.len()).filter(|&c| !settled[c]).collect();
    while !pending.is_empty() {
        let mut next_pending = Vec::new();
        for &comp in &pending {
            let label = comp_label[comp];
            let members = &comp_pixels[comp];
            let mut best: Option<(usize, u32)> = None; // (size, label)
            for &p in members {
                let (r, c) = (p as usize / w, p as usize % w);
                let mut consider = |q: usize| {
                    if !settled[comp_of[q] as usize] {
                        return;
                    }
                    let nl = out[q];
                    let size = seg_size[nl as usize];
                    match best {
                        Some((bs, bl)) if bs > size || (bs == size && bl <= nl) => {}
                        _ => best = Some((size, nl)),
                    }
                };
                if r > 0 {
                    consider(p as usize - w);
                }
                if r + 1 < h {
                    consider(p as usize + w);
                }
                if c > 0 {
                    consider(p as usize - 1);
                }
                if c + 1 < w {
                    consider(p as usize + 1);
                }
            }
            match best {
                Some((_, new_label)) if new_label != label => {
                    for &p in members {
                        out[p as usize] = new_label;
                    }
                    seg_size[label as usize] -= members.len();
                    seg_size[new_label as usize] += members.len();
                    settled[comp] = true;
                }
                // Largest adjacent settled segment carries this orphan's own
                // label: already connected through it.
                Some(_) => settled[comp] = true,
                None => next_pending.push(comp),
            }
        }
        debug_assert_ne!(pending.len(), next_pending.len(), "orphan merge stalled");
        pending = next_pending;
    }

    // Densify in order of first appearance.
    let mut remap = vec![u32::MAX; num_labels];
    let mut next = 0u32;
    for l in out.iter_mut() {
        let old = *l as usize;
        if remap[old] == u32::MAX {
            remap[old] = next;
            next += 1;
        }
        *l = remap[old];
    }
    (out, next as usize)
}

/// sRGB (8-bit, D65) to CIELAB, one `[L, a, b]` triple per pixel.
pub fn rgb_to_lab(image: &RgbImage) -> Vec<f32> {
    let mut lab = Vec::with_capacity(image.data.len());
    // 256-entry lookup for the sRGB inverse companding.
    let mut linear = [0.0f64; 256];
    for (i, v) in linear.iter_mut().enumerate() {
        let c = i as f64 / 255.0;
        *v = if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        };
    }
    for px in image.data.chunks_exact(3) {
        let r = linear[px[0] as usize];
        let g = linear[px[1] as usize];
        let b = linear[px[2] as usize];
        let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
        let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
        let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
        let fx = lab_f(x / 0.95047);
        let fy = lab_f(y);
        let fz = lab_f(z / 1.08883);
        lab.push((116.0 * fy - 16.0) as f32);
        lab.push((500.0 * (fx - fy)) as f32);
        lab.push((200.0 * (fy - fz)) as f32);
    }
    lab
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Paint segment boundaries onto a copy of `image`.
pub fn boundary_overlay(image: &RgbImage, seg: &Segmentation, color: [u8; 3]) -> RgbImage {
    let mut out = image.clone();
    let (h, w) = (seg.height, seg.width);
    for r in 0..h {
        for c in 0..w {
            let l = seg.labels[r * w + c];
            let boundary = (r + 1 < h && seg.labels[(r + 1) * w + c] != l)
                || (c + 1 < w && seg.labels[r * w + c + 1] != l);
            if boundary {
                out.set_pixel(r, c, color);
            }
        }
    }
    out
}
