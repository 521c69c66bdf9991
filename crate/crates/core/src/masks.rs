//! Nucleus shape dictionaries and randomized polygon mask synthesis.
//!
//! A [`ShapeDictionary`] summarizes labeled instance maps as equivalent radii
//! plus angular radial profiles. [`sample_mask`] draws nuclei from it,
//! jitters size and shape, places them on a jittered grid (a configurable
//! share is re-centered against an existing nucleus to form clumps), and
//! rasterizes each as a polygon. Overlap pixels belong to the later-placed
//! instance. Everything is a pure function of its inputs and seed.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, InstanceMap, RgbImage};

/// One nucleus silhouette: size plus a normalized angular radius profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub equivalent_radius: f64,
    /// K radii sampled at equal angles, divided by `equivalent_radius`;
    /// every value lies in (0, 1.5].
    pub radial_profile: Vec<f64>,
    pub source_organ: String,
}

/// Empirical nucleus size/shape statistics used by the sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeDictionary {
    pub entries: Vec<ShapeEntry>,
    pub profile_resolution: usize,
}

/// Sampler knobs. All fractions are in [0, 1]; `max_overlap` in [0, 0.5).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerParams {
    pub canvas: (usize, usize),
    pub target_count: usize,
    pub size_jitter: f64,
    pub shape_jitter: f64,
    pub clump_fraction: f64,
    pub max_overlap: f64,
    /// Total jittered-grid cell count; realized as the smallest g x g grid
    /// with g^2 >= placement_grid_cells.
    pub placement_grid_cells: usize,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams {
            canvas: (256, 256),
            target_count: 40,
            size_jitter: 0.3,
            shape_jitter: 0.25,
            clump_fraction: 0.2,
            max_overlap: 0.2,
            placement_grid_cells: 64,
        }
    }
}

impl SamplerParams {
    fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if !(0.0..=1.0).contains(&v) {
                Err(Error::InvalidArgument(format!("{name} must be in [0,1], got {v}")))
            } else {
                Ok(())
            }
        };
        frac("size_jitter", self.size_jitter)?;
        frac("shape_jitter", self.shape_jitter)?;
        frac("clump_fraction", self.clump_fraction)?;
        if !(0.0..0.5).contains(&self.max_overlap) {
            return Err(Error::InvalidArgument(format!(
                "max_overlap must be in [0,0.5), got {}",
                self.max_overlap
            )));
        }
        if self.canvas.0 < 64 || self.canvas.1 < 64 {
            return Err(Error::InvalidArgument(format!(
                "canvas must be at least 64x64, got {}x{}",
                self.canvas.0, self.canvas.1
            )));
        }
        if self.placement_grid_cells == 0 {
            return Err(Error::InvalidArgument("placement_grid_cells must be >= 1".into()));
        }
        Ok(())
    }
}

/// A sampled ground-truth pair: binary render plus labeled instances.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthMaskPair {
    pub render: BinaryMask,
    pub instances: InstanceMap,
    pub seed: u64,
    pub params: SamplerParams,
    /// True when fewer than `target_count` nuclei could be placed.
    pub truncated: bool,
    /// Instance label pairs that shared pixels at placement time.
    pub overlap_pairs: Vec<(u32, u32)>,
    /// Post-jitter equivalent radius of each placed instance.
    pub nominal_radii: Vec<f64>,
}

/// Summarize labeled instance maps into a shape dictionary.
///
/// Instances touching the image border are excluded. Per instance, the
/// equivalent radius is `sqrt(area/pi)` and the profile is the farthest
/// boundary distance from the centroid in each of K equal angular bins,
/// normalized by the equivalent radius.
pub fn build_shape_dictionary(
    maps: &[InstanceMap],
    profile_resolution: usize,
) -> Result<ShapeDictionary> {
    let tagged: Vec<(String, &InstanceMap)> =
        maps.iter().map(|m| ("unknown".to_string(), m)).collect();
    build_shape_dictionary_tagged(&tagged, profile_resolution)
}

/// Same as [`build_shape_dictionary`] but with a source-organ tag per map.
pub fn build_shape_dictionary_tagged(
    maps: &[(String, &InstanceMap)],
    profile_resolution: usize,
) -> Result<ShapeDictionary> {
    if profile_resolution < 3 {
        return Err(Error::InvalidArgument(format!(
            "profile_resolution must be >= 3, got {profile_resolution}"
        )));
    }
    let k = profile_resolution;
    let mut entries = Vec::new();
    for (organ, map) in maps {
        let (h, w) = (map.height(), map.width());
        let mut pixels: Vec<Vec<(usize, usize)>> = vec![Vec::new(); map.max_label() as usize + 1];
        let mut touches_border = vec![false; pixels.len()];
        for ((y, x), &l) in map.labels.indexed_iter() {
            if l == 0 {
                continue;
            }
            pixels[l as usize].push((y, x));
            if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                touches_border[l as usize] = true;
            }
        }
        for (label, pix) in pixels.iter().enumerate() {
            if pix.len() < 4 || touches_border[label] {
                continue;
            }
            let area = pix.len() as f64;
            let equivalent_radius = (area / PI).sqrt();
            let cy = pix.iter().map(|&(y, _)| y as f64 + 0.5).sum::<f64>() / area;
            let cx = pix.iter().map(|&(_, x)| x as f64 + 0.5).sum::<f64>() / area;
            // farthest pixel distance per angular bin
            let mut profile = vec![0.0f64; k];
            for &(y, x) in pix {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let dist = (dy * dy + dx * dx).sqrt();
                let theta = dy.atan2(dx); // [-pi, pi]
                let mut bin = (((theta + PI) / (2.0 * PI)) * k as f64).floor() as isize;
                bin = bin.rem_euclid(k as isize);
                let b = bin as usize;
                if dist > profile[b] {
                    profile[b] = dist;
                }
            }
            // fill empty bins from the circularly nearest non-empty one
            let filled: Vec<f64> = (0..k)
                .map(|i| {
                    if profile[i] > 0.0 {
                        return profile[i];
                    }
                    for step in 1..k {
                        let fwd = profile[(i + step) % k];
                        if fwd > 0.0 {
                            return fwd;
                        }
                        let back = profile[(i + k - step) % k];
                        if back > 0.0 {
                            return back;
                        }
                    }
                    equivalent_radius
                })
                .collect();
            let radial_profile: Vec<f64> =
                filled.iter().map(|d| (d / equivalent_radius).clamp(0.2, 1.5)).collect();
            entries.push(ShapeEntry {
                equivalent_radius,
                radial_profile,
                source_organ: organ.clone(),
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyDictionary(
            "no usable instances (all empty, tiny, or touching the border)".into(),
        ));
    }
    Ok(ShapeDictionary { entries, profile_resolution: k })
}

/// Polygon described by its vertex coordinates (y, x).
struct Polygon {
    vertices: Vec<(f64, f64)>,
}

impl Polygon {
    /// Star polygon around (cy, cx) from per-vertex radii.
    fn star(cy: f64, cx: f64, radii: &[f64], rotation: f64) -> Polygon {
        let k = radii.len();
        let vertices = (0..k)
            .map(|j| {
                let theta = rotation + 2.0 * PI * j as f64 / k as f64;
                (cy + radii[j] * theta.sin(), cx + radii[j] * theta.cos())
            })
            .collect();
        Polygon { vertices }
    }

    /// Even-odd point-in-polygon test.
    fn contains(&self, py: f64, px: f64) -> bool {
        let mut inside = false;
        let n = self.vertices.len();
        let mut j = n - 1;
        for i in 0..n {
            let (yi, xi) = self.vertices[i];
            let (yj, xj) = self.vertices[j];
            if (yi > py) != (yj > py) {
                let x_cross = xj + (py - yj) / (yi - yj) * (xi - xj);
                if px < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    /// Pixels whose centers fall inside the polygon, clipped to the canvas.
    fn rasterize(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let ys: Vec<f64> = self.vertices.iter().map(|v| v.0).collect();
        let xs: Vec<f64> = self.vertices.iter().map(|v| v.1).collect();
        let y0 = ys.iter().cloned().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let y1 = (ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil() as isize)
            .min(h as isize - 1)
            .max(0) as usize;
        let x0 = xs.iter().cloned().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let x1 = (xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil() as isize)
            .min(w as isize - 1)
            .max(0) as usize;
        let mut out = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                if self.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

struct Placed {
    cy: f64,
    cx: f64,
    area: usize,
    radius: f64,
}

/// Draw a randomized mask/instance pair from the dictionary.
///
/// Deterministic for fixed `(dict, params, seed)`. If the target count is
/// unachievable within a 10x attempt budget, the pair is returned truncated
/// with `truncated = true` rather than looping forever.
pub fn sample_mask(
    dict: &ShapeDictionary,
    params: &SamplerParams,
    seed: u64,
) -> Result<SynthMaskPair> {
    params.validate()?;
    if dict.entries.is_empty() {
        return Err(Error::EmptyDictionary("cannot sample from an empty dictionary".into()));
    }
    let (h, w) = params.canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = InstanceMap::new(h, w);
    let mut placed: Vec<Placed> = Vec::new();
    let mut overlap_pairs = Vec::new();
    let mut nominal_radii = Vec::new();

    let n = params.target_count;
    let n_clump = (params.clump_fraction * n as f64).round() as usize;
    let n_free = n - n_clump.min(n);
    let grid = (params.placement_grid_cells as f64).sqrt().ceil().max(1.0) as usize;
    let cell_h = h as f64 / grid as f64;
    let cell_w = w as f64 / grid as f64;

    let mut attempts = 0usize;
    let budget = 10 * n.max(1);

    // sample one jittered shape; returns (radii per vertex, nominal radius)
    let sample_shape = |rng: &mut ChaCha8Rng| -> (Vec<f64>, f64) {
        let entry = &dict.entries[rng.random_range(0..dict.entries.len())];
        let u: f64 = rng.random_range(-1.0..=1.0);
        let radius = entry.equivalent_radius * (1.0 + params.size_jitter * u);
        let radii: Vec<f64> = entry
            .radial_profile
            .iter()
            .map(|p| {
                let v: f64 = rng.random_range(-1.0..=1.0);
                (radius * p * (1.0 + params.shape_jitter * v)).max(0.5)
            })
            .collect();
        (radii, radius.max(0.5))
    };

    // Canvas clipping and shape jitter both move the rasterized area away
    // from the nominal pi*r^2; reject candidates outside these bounds so
    // every placed instance honors the [0.25, 4] area contract.
    let area_ok = |pix_len: usize, radius: f64| {
        let implied = PI * radius * radius;
        (pix_len as f64) >= 0.3 * implied && (pix_len as f64) <= 3.0 * implied
    };

    // overlap per existing instance label for a candidate pixel set
    let overlaps_of = |labels: &InstanceMap, pix: &[(usize, usize)]| {
        let mut counts: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
        for &(y, x) in pix {
            let l = labels.labels[[y, x]];
            if l > 0 {
                *counts.entry(l).or_insert(0) += 1;
            }
        }
        counts
    };

    let mut paint = |labels: &mut InstanceMap,
                     placed: &mut Vec<Placed>,
                     overlap_pairs: &mut Vec<(u32, u32)>,
                     pix: Vec<(usize, usize)>,
                     cy: f64,
                     cx: f64,
                     radius: f64| {
        let label = placed.len() as u32 + 1;
        let counts = overlaps_of(labels, &pix);
        for (&other, &shared) in &counts {
            if shared > 0 {
                overlap_pairs.push((other, label));
                // the earlier instance loses contested pixels
                placed[other as usize - 1].area -= shared;
            }
        }
        for &(y, x) in &pix {
            labels.labels[[y, x]] = label;
        }
        placed.push(Placed { cy, cx, area: pix.len(), radius });
        nominal_radii.push(radius);
    };

    // free placements: jittered grid cells, zero overlap required
    let mut free_placed = 0;
    while free_placed < n_free && attempts < budget {
        attempts += 1;
        let cell = rng.random_range(0..grid * grid);
        let (gy, gx) = (cell / grid, cell % grid);
        let cy = (gy as f64 + 0.5) * cell_h + rng.random_range(-0.5..0.5) * cell_h;
        let cx = (gx as f64 + 0.5) * cell_w + rng.random_range(-0.5..0.5) * cell_w;
        let rotation = rng.random_range(0.0..2.0 * PI);
        let (radii, radius) = sample_shape(&mut rng);
        let poly = Polygon::star(cy, cx, &radii, rotation);
        let pix = poly.rasterize(h, w);
        if pix.is_empty() || !area_ok(pix.len(), radius) || !overlaps_of(&labels, &pix).is_empty()
        {
            continue;
        }
        paint(&mut labels, &mut placed, &mut overlap_pairs, pix, cy, cx, radius);
        free_placed += 1;
    }

    // clumped placements: re-centered next to an existing nucleus so the
    // pixel overlap is > 0 but at most max_overlap of the smaller nucleus.
    // With max_overlap == 0 that window is empty, so they degrade to
    // adjacent non-overlapping placements.
    let mut clump_placed = 0;
    while clump_placed < n_clump && attempts < budget {
        attempts += 1;
        if placed.is_empty() {
            // nothing to clump against yet; fall back to a free placement
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let rotation = rng.random_range(0.0..2.0 * PI);
            let (radii, radius) = sample_shape(&mut rng);
            let poly = Polygon::star(cy, cx, &radii, rotation);
            let pix = poly.rasterize(h, w);
            if pix.is_empty()
                || !area_ok(pix.len(), radius)
                || !overlaps_of(&labels, &pix).is_empty()
            {
                continue;
            }
            paint(&mut labels, &mut placed, &mut overlap_pairs, pix, cy, cx, radius);
            clump_placed += 1;
            continue;
        }
        let anchor = &placed[rng.random_range(0..placed.len())];
        let (ay, ax, ar) = (anchor.cy, anchor.cx, anchor.radius);
        let phi = rng.random_range(0.0..2.0 * PI);
        let rotation = rng.random_range(0.0..2.0 * PI);
        let (radii, radius) = sample_shape(&mut rng);
        // bisect the center distance until the overlap lands in range
        let mut lo = 0.3 * (ar + radius);
        let mut hi = 1.6 * (ar + radius);
        let mut accepted = false;
        for _ in 0..12 {
            let d = 0.5 * (lo + hi);
            let cy = ay + d * phi.sin();
            let cx = ax + d * phi.cos();
            let poly = Polygon::star(cy, cx, &radii, rotation);
            let pix = poly.rasterize(h, w);
            if pix.is_empty() || !area_ok(pix.len(), radius) {
                break;
            }
            let counts = overlaps_of(&labels, &pix);
            let total_overlap: usize = counts.values().sum();
            if params.max_overlap == 0.0 {
                if total_overlap == 0 {
                    paint(&mut labels, &mut placed, &mut overlap_pairs, pix, cy, cx, radius);
                    accepted = true;
                    break;
                }
                lo = d; // move outward until clear
                continue;
            }
            let within = |(&other, &shared): (&u32, &usize)| {
                let victim = &placed[other as usize - 1];
                let floor = 0.3 * PI * victim.radius * victim.radius;
                shared as f64 <= params.max_overlap * (victim.area.min(pix.len()) as f64)
                    && (victim.area - shared) as f64 >= floor
            };
            if total_overlap > 0 && counts.iter().all(within) {
                paint(&mut labels, &mut placed, &mut overlap_pairs, pix, cy, cx, radius);
                accepted = true;
                break;
            }
            if total_overlap == 0 {
                hi = d; // too far out, pull in
            } else {
                lo = d; // overlapping too much, push out
            }
        }
        if accepted {
            clump_placed += 1;
        }
    }

    let truncated = placed.len() < n;
    // labels are already consecutive 1..K in placement order, which keeps
    // overlap_pairs and nominal_radii aligned with them
    let instances = labels;
    Ok(SynthMaskPair {
        render: instances.to_binary(),
        instances,
        seed,
        params: params.clone(),
        truncated,
        overlap_pairs,
        nominal_radii,
    })
}

/// Render an instance pair for the translation networks: nuclei white,
/// background black, and a 1-pixel mid-gray seam where a later-placed
/// instance borders an earlier one, so clump separations stay visible.
pub fn render_mask_image(pair: &SynthMaskPair) -> RgbImage {
    render_instances(&pair.instances)
}

/// Render any instance map with the white/black/gray-seam convention.
pub fn render_instances(instances: &InstanceMap) -> RgbImage {
    let (h, w) = (instances.height(), instances.width());
    let mut img = RgbImage::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let l = instances.labels[[y, x]];
            if l == 0 {
                continue;
            }
            let mut seam = false;
            let mut check = |ny: isize, nx: isize| {
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    let q = instances.labels[[ny as usize, nx as usize]];
                    if q > 0 && q < l {
                        seam = true;
                    }
                }
            };
            check(y as isize - 1, x as isize);
            check(y as isize + 1, x as isize);
            check(y as isize, x as isize - 1);
            check(y as isize, x as isize + 1);
            let v = if seam { 128 } else { 255 };
            img.set(y, x, [v, v, v]);
        }
    }
    img
}

/// Persist a dictionary as CSV: `organ,equivalent_radius,p0..p{K-1}`.
pub fn save_dictionary(dict: &ShapeDictionary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    {
        let mut writer = csv::Writer::from_writer(&mut buf);
        let mut header = vec!["organ".to_string(), "equivalent_radius".to_string()];
        header.extend((0..dict.profile_resolution).map(|i| format!("p{i}")));
        writer
            .write_record(&header)
            .map_err(|e| Error::InvalidArgument(format!("csv write: {e}")))?;
        for e in &dict.entries {
            let mut rec = vec![e.source_organ.clone(), format!("{}", e.equivalent_radius)];
            rec.extend(e.radial_profile.iter().map(|p| format!("{p}")));
            writer.write_record(&rec).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
    }
    crate::raster::write_bytes_atomic(path, &buf)
}

pub fn load_dictionary(path: impl AsRef<Path>) -> Result<ShapeDictionary> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::InvalidArgument(format!("bad dictionary file: {e}")),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::InvalidArgument(format!("bad dictionary header: {e}")))?
        .clone();
    if headers.len() < 3 {
        return Err(Error::InvalidArgument("dictionary needs organ, radius, profile".into()));
    }
    let k = headers.len() - 2;
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::InvalidArgument(format!("bad record: {e}")))?;
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("bad number {s:?}: {e}")))
        };
        let equivalent_radius = parse(&record[1])?;
        let radial_profile: Result<Vec<f64>> = (0..k).map(|i| parse(&record[2 + i])).collect();
        entries.push(ShapeEntry {
            source_organ: record[0].to_string(),
            equivalent_radius,
            radial_profile: radial_profile?,
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyDictionary(format!("{} has no entries", path.display())));
    }
    Ok(ShapeDictionary { entries, profile_resolution: k })
}

/// A disk-only dictionary, useful for toy problems and tests.
pub fn disk_dictionary(radii: &[f64], profile_resolution: usize) -> ShapeDictionary {
    ShapeDictionary {
        entries: radii
            .iter()
            .map(|&r| ShapeEntry {
                equivalent_radius: r,
                radial_profile: vec![1.0; profile_resolution],
                source_organ: "disk".into(),
            })
            .collect(),
        profile_resolution,
    }
}
