//! Procedural face renderer with fully known identity/attribute factors.
//!
//! Faces are built from an ellipse head, two ellipse eyes with brow arcs, a
//! triangle nose and a quadratic-curve mouth over a flat hue background. Yaw
//! is approximated by a horizontal shear of all features about the face
//! centre. Every operation is a pure function of its seed/arguments, so the
//! corpus doubles as a ground-truth oracle for landmarks, pose and
//! expression.
//!
//! Factor vector field order (also the manifest column order):
//! `face_aspect, skin_r, skin_g, skin_b, eye_spacing, nose_scale,
//!  yaw, dx, dy, mouth_curve, brightness, background_hue`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imageio;
use crate::rng::{tag, Stream};
use crate::{Image, LandmarkSet};

pub const SUPPORTED_RESOLUTIONS: [usize; 4] = [16, 32, 64, 128];
pub const FACTOR_DIM: usize = 12;
/// Translation draws are bounded so that all 68 landmarks stay inside the
/// frame at every supported resolution.
pub const MAX_TRANSLATION: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityParams {
    pub identity_id: u32,
    /// Width/height ratio of the head, in [0.7, 1.3].
    pub face_aspect: f64,
    /// RGB in [0, 1].
    pub skin_tone: [f64; 3],
    /// Eye x-offset as a fraction of the head half-width, in [0.25, 0.45].
    pub eye_spacing: f64,
    /// Nose height as a fraction of the resolution, in [0.05, 0.2].
    pub nose_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeParams {
    /// Degrees in [-45, 45]; rendered as a horizontal shear.
    pub yaw: f64,
    /// Pixel offsets, each in [-1.5, 1.5].
    pub translation: (f64, f64),
    /// Frown (-1) to smile (+1).
    pub mouth_curve: f64,
    /// Multiplicative gain in [0.6, 1.4].
    pub brightness: f64,
    /// Background hue angle in [0, 360).
    pub background_hue: f64,
}

/// Identity factors (minus the label) concatenated with attribute factors.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorVector(pub [f64; FACTOR_DIM]);

impl FactorVector {
    pub fn from_params(id: &IdentityParams, attr: &AttributeParams) -> Self {
        FactorVector([
            id.face_aspect,
            id.skin_tone[0],
            id.skin_tone[1],
            id.skin_tone[2],
            id.eye_spacing,
            id.nose_scale,
            attr.yaw,
            attr.translation.0,
            attr.translation.1,
            attr.mouth_curve,
            attr.brightness,
            attr.background_hue,
        ])
    }

    pub fn to_params(&self, identity_id: u32) -> (IdentityParams, AttributeParams) {
        let f = &self.0;
        (
            IdentityParams {
                identity_id,
                face_aspect: f[0],
                skin_tone: [f[1], f[2], f[3]],
                eye_spacing: f[4],
                nose_scale: f[5],
            },
            AttributeParams {
                yaw: f[6],
                translation: (f[7], f[8]),
                mouth_curve: f[9],
                brightness: f[10],
                background_hue: f[11],
            },
        )
    }

    pub fn yaw(&self) -> f64 {
        self.0[6]
    }

    pub fn mouth_curve(&self) -> f64 {
        self.0[9]
    }
}

/// Identity factors as a deterministic function of `(master seed, identity_id)`.
pub fn sample_identity(master_seed: u64, identity_id: u32) -> IdentityParams {
    let mut s = Stream::split(master_seed, tag::IDENTITY, identity_id as u64);
    let face_aspect = s.range(0.7, 1.3);
    let r = s.range(0.45, 0.95);
    let g = r * s.range(0.72, 0.95);
    let b = g * s.range(0.70, 0.95);
    IdentityParams {
        identity_id,
        face_aspect,
        skin_tone: [r, g, b],
        eye_spacing: s.range(0.25, 0.45),
        nose_scale: s.range(0.05, 0.2),
    }
}

/// Attribute factors from a caller-owned stream (fixed draw count: 6).
pub fn sample_attributes(stream: &mut Stream) -> AttributeParams {
    AttributeParams {
        yaw: stream.range(-45.0, 45.0),
        translation: (
            stream.range(-MAX_TRANSLATION, MAX_TRANSLATION),
            stream.range(-MAX_TRANSLATION, MAX_TRANSLATION),
        ),
        mouth_curve: stream.range(-1.0, 1.0),
        brightness: stream.range(0.6, 1.4),
        background_hue: stream.range(0.0, 360.0),
    }
}

fn check_resolution(resolution: usize) -> Result<()> {
    if SUPPORTED_RESOLUTIONS.contains(&resolution) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "unsupported resolution {resolution}, expected one of {SUPPORTED_RESOLUTIONS:?}"
        )))
    }
}

// Face geometry in face-local pixel coordinates (origin at the face centre,
// y growing downward), before shear and translation.
struct FaceGeometry {
    a: f64, // head half-width
    b: f64, // head half-height
    eye_off: f64,
    eye_y: f64,
    eye_rx: f64,
    eye_ry: f64,
    brow_y: f64,
    brow_span: f64,
    brow_arch: f64,
    nose_apex_y: f64,
    nose_base_y: f64,
    nose_hw: f64,
    mouth_y: f64,
    mouth_hw: f64,
    mouth_amp: f64,
    shear: f64,
}

impl FaceGeometry {
    fn new(id: &IdentityParams, attr: &AttributeParams, resolution: usize) -> Self {
        let r = resolution as f64;
        let a = 0.30 * r * id.face_aspect;
        let b = 0.36 * r;
        let eye_rx = 0.05 * r;
        FaceGeometry {
            a,
            b,
            eye_off: id.eye_spacing * a,
            eye_y: -0.10 * r,
            eye_rx,
            eye_ry: 0.035 * r,
            brow_y: -0.185 * r,
            brow_span: 1.3 * eye_rx,
            brow_arch: 0.02 * r,
            nose_apex_y: -0.02 * r,
            nose_base_y: -0.02 * r + id.nose_scale * r,
            nose_hw: 0.55 * id.nose_scale * r,
            mouth_y: 0.22 * r,
            mouth_hw: 0.42 * a,
            mouth_amp: 0.06 * r * attr.mouth_curve,
            shear: attr.yaw / 45.0 * 0.15,
        }
    }

    /// Mouth centre-line: corners at `mouth_y`, centre displaced by the
    /// expression amplitude (positive = smile, centre below corners).
    fn mouth_curve_y(&self, t: f64) -> f64 {
        self.mouth_y + self.mouth_amp * (1.0 - t * t)
    }

    fn brow_curve_y(&self, t: f64) -> f64 {
        self.brow_y - self.brow_arch * (1.0 - t * t)
    }
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h_deg.rem_euclid(360.0)) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
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

const AA: f64 = 1.0; // soft-edge width in pixels

fn coverage(signed_dist: f64) -> f64 {
    (0.5 - signed_dist / AA).clamp(0.0, 1.0)
}

fn ellipse_dist(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let nx = (x - cx) / rx;
    let ny = (y - cy) / ry;
    let e = nx * nx + ny * ny - 1.0;
    let gx = 2.0 * nx / rx;
    let gy = 2.0 * ny / ry;
    e / (gx * gx + gy * gy).sqrt().max(1e-9)
}

fn line_dist(x: f64, y: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> f64 {
    let ex = x2 - x1;
    let ey = y2 - y1;
    let len = (ex * ex + ey * ey).sqrt().max(1e-9);
    (ex * (y - y1) - ey * (x - x1)) / len
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], alpha: f64) {
    for c in 0..3 {
        dst[c] = dst[c] * (1.0 - alpha) + src[c] * alpha;
    }
}

/// Renders a face. Output pixels lie in `[-1, 1]`, layout `[3, H, W]`.
pub fn render(id: &IdentityParams, attr: &AttributeParams, resolution: usize) -> Result<Image> {
    check_resolution(resolution)?;
    let geo = FaceGeometry::new(id, attr, resolution);
    let r = resolution as f64;
    let cx = r / 2.0 + attr.translation.0;
    let cy = r / 2.0 + attr.translation.1;

    let background = hsv_to_rgb(attr.background_hue, 0.35, 0.50);
    let skin = id.skin_tone;
    let nose_color = [skin[0] * 0.72, skin[1] * 0.72, skin[2] * 0.72];
    let eye_color = [0.10, 0.10, 0.14];
    let brow_color = [0.15, 0.11, 0.08];
    let mouth_color = [0.55, 0.18, 0.22];

    // Nose triangle corners in unsheared local coordinates.
    let apex = (0.0, geo.nose_apex_y);
    let bl = (-geo.nose_hw, geo.nose_base_y);
    let br = (geo.nose_hw, geo.nose_base_y);
    let centroid = (0.0, (geo.nose_apex_y + 2.0 * geo.nose_base_y) / 3.0);
    let edges = [(apex, br), (br, bl), (bl, apex)];
    let signs: Vec<f64> = edges
        .iter()
        .map(|&((x1, y1), (x2, y2))| {
            if line_dist(centroid.0, centroid.1, x1, y1, x2, y2) > 0.0 {
                -1.0
            } else {
                1.0
            }
        })
        .collect();

    let mouth_th = 0.018 * r;
    let brow_th = 0.012 * r;

    let mut img = Array3::<f32>::zeros((3, resolution, resolution));
    for py in 0..resolution {
        for px in 0..resolution {
            let fx = px as f64 + 0.5 - cx;
            let fy = py as f64 + 0.5 - cy;
            // Undo the yaw shear to test shapes in the face frame.
            let ux = fx - geo.shear * fy;
            let uy = fy;

            let mut rgb = background;

            let d_head = ellipse_dist(ux, uy, 0.0, 0.0, geo.a, geo.b);
            blend(&mut rgb, skin, coverage(d_head));

            for side in [-1.0, 1.0] {
                let ex = side * geo.eye_off;
                // brow
                let t = (ux - ex) / geo.brow_span;
                let d_brow = (uy - geo.brow_curve_y(t.clamp(-1.0, 1.0))).abs() - brow_th;
                let d_brow = d_brow.max((t.abs() - 1.0) * geo.brow_span);
                blend(&mut rgb, brow_color, coverage(d_brow));
                // eye
                let d_eye = ellipse_dist(ux, uy, ex, geo.eye_y, geo.eye_rx, geo.eye_ry);
                blend(&mut rgb, eye_color, coverage(d_eye));
            }

            let d_nose = edges
                .iter()
                .zip(&signs)
                .map(|(&((x1, y1), (x2, y2)), &s)| s * line_dist(ux, uy, x1, y1, x2, y2))
                .fold(f64::NEG_INFINITY, f64::max);
            blend(&mut rgb, nose_color, coverage(d_nose));

            let t = (ux / geo.mouth_hw).clamp(-1.0, 1.0);
            let d_mouth = (uy - geo.mouth_curve_y(t)).abs() - mouth_th;
            let d_mouth = d_mouth.max((ux.abs() / geo.mouth_hw - 1.0) * geo.mouth_hw);
            blend(&mut rgb, mouth_color, coverage(d_mouth));

            for c in 0..3 {
                let v = (rgb[c] * attr.brightness).clamp(0.0, 1.0);
                img[(c, py, px)] = (2.0 * v - 1.0) as f32;
            }
        }
    }
    Ok(img)
}

/// Analytic 68-point landmarks following the standard annotation topology:
/// 0–16 jaw, 17–26 brows, 27–30 nose bridge, 31–35 nose base, 36–47 eyes,
/// 48–59 outer lip, 60–67 inner lip.
pub fn landmarks_oracle(
    id: &IdentityParams,
    attr: &AttributeParams,
    resolution: usize,
) -> Result<LandmarkSet> {
    check_resolution(resolution)?;
    let geo = FaceGeometry::new(id, attr, resolution);
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(68);

    // 0..=16 jaw: lower half of the head ellipse, left ear to right ear.
    for i in 0..17 {
        let theta = std::f64::consts::PI * (1.0 - i as f64 / 16.0);
        pts.push((geo.a * theta.cos(), geo.b * theta.sin()));
    }
    // 17..=26 brows (left then right), 5 points each.
    for side in [-1.0, 1.0] {
        let ex = side * geo.eye_off;
        for k in 0..5 {
            let t = -1.0 + 0.5 * k as f64;
            pts.push((ex + t * geo.brow_span, geo.brow_curve_y(t)));
        }
    }
    // 27..=30 nose bridge: eye level down to just above the base.
    for k in 0..4 {
        let f = k as f64 / 3.0;
        let y = geo.eye_y + f * (geo.nose_base_y - geo.eye_y);
        pts.push((0.0, y));
    }
    // 31..=35 nose base edge.
    for k in 0..5 {
        let t = -1.0 + 0.5 * k as f64;
        pts.push((t * geo.nose_hw, geo.nose_base_y));
    }
    // 36..=47 eyes: 6-point hexagon per eye, outer corner first.
    for side in [-1.0, 1.0] {
        let ex = side * geo.eye_off;
        for ang in [180.0f64, 120.0, 60.0, 0.0, -60.0, -120.0] {
            let a = ang.to_radians();
            pts.push((ex + geo.eye_rx * a.cos(), geo.eye_y - geo.eye_ry * a.sin()));
        }
    }
    // 48..=59 outer lip: corners plus upper/lower arcs.
    let th = 0.018 * (resolution as f64);
    pts.push((-geo.mouth_hw, geo.mouth_curve_y(-1.0)));
    for k in 0..5 {
        let t = -2.0 / 3.0 + (k as f64) / 3.0;
        pts.push((t * geo.mouth_hw, geo.mouth_curve_y(t) - th));
    }
    pts.push((geo.mouth_hw, geo.mouth_curve_y(1.0)));
    for k in 0..5 {
        let t = 2.0 / 3.0 - (k as f64) / 3.0;
        pts.push((t * geo.mouth_hw, geo.mouth_curve_y(t) + th));
    }
    // 60..=67 inner lip.
    pts.push((-0.9 * geo.mouth_hw, geo.mouth_curve_y(-0.9)));
    for t in [-0.45, 0.0, 0.45] {
        pts.push((t * geo.mouth_hw, geo.mouth_curve_y(t) - 0.3 * th));
    }
    pts.push((0.9 * geo.mouth_hw, geo.mouth_curve_y(0.9)));
    for t in [0.45, 0.0, -0.45] {
        pts.push((t * geo.mouth_hw, geo.mouth_curve_y(t) + 0.3 * th));
    }

    debug_assert_eq!(pts.len(), 68);
    let r = resolution as f64;
    let mut out = Array2::<f32>::zeros((68, 2));
    for (i, (x, y)) in pts.into_iter().enumerate() {
        // Shear about the face centre, then place. Translation is added last
        // so it shifts every landmark by exactly (dx, dy).
        let sx = x + geo.shear * y;
        out[(i, 0)] = (r / 2.0 + attr.translation.0 + sx) as f32;
        out[(i, 1)] = (r / 2.0 + attr.translation.1 + y) as f32;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub image: Image,
    pub identity_id: u32,
    pub factors: FactorVector,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
    pub resolution: usize,
    pub n_identities: usize,
    pub seed: u64,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Builds the corpus: `n_identities · images_per_identity` renders, each
/// entry reproducible from `(seed, identity, image index)` alone.
pub fn make_corpus(
    n_identities: usize,
    images_per_identity: usize,
    resolution: usize,
    seed: u64,
) -> Result<Corpus> {
    if n_identities < 2 {
        return Err(Error::config("corpus needs at least 2 identities"));
    }
    if images_per_identity < 1 {
        return Err(Error::config("corpus needs at least 1 image per identity"));
    }
    check_resolution(resolution)?;

    let specs: Vec<(u32, u64)> = (0..n_identities)
        .flat_map(|id| (0..images_per_identity).map(move |j| (id as u32, (id * images_per_identity + j) as u64)))
        .collect();
    let entries: Vec<CorpusEntry> = specs
        .par_iter()
        .map(|&(identity_id, entry_idx)| {
            let id = sample_identity(seed, identity_id);
            let mut stream = Stream::split(seed, tag::ATTRIBUTES, entry_idx);
            let attr = sample_attributes(&mut stream);
            let image = render(&id, &attr, resolution).expect("resolution checked above");
            CorpusEntry {
                image,
                identity_id,
                factors: FactorVector::from_params(&id, &attr),
            }
        })
        .collect();
    Ok(Corpus {
        entries,
        resolution,
        n_identities,
        seed,
    })
}

/// Writes `manifest.tsv` plus one 8-bit PNG per entry.
pub fn export_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.tsv"))?);
    for (i, e) in corpus.entries.iter().enumerate() {
        let filename = format!("face_{i:06}.png");
        imageio::save_png(dir.join(&filename), &e.image)?;
        write!(manifest, "{filename}\t{}", e.identity_id)?;
        for v in e.factors.0 {
            write!(manifest, "\t{v}")?;
        }
        writeln!(manifest)?;
    }
    manifest.flush()?;
    Ok(())
}

/// Reads a corpus directory written by [`export_corpus`]. Images come back
/// quantised to the 8-bit PNG grid.
pub fn import_corpus(dir: impl AsRef<Path>, seed: u64) -> Result<Corpus> {
    let dir = dir.as_ref();
    let file = std::fs::File::open(dir.join("manifest.tsv"))
        .map_err(|e| Error::state(format!("corpus manifest: {e}")))?;
    let mut entries = Vec::new();
    let mut max_id = 0u32;
    let mut resolution = 0usize;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 + FACTOR_DIM {
            return Err(Error::format(format!(
                "manifest line {}: expected {} fields, got {}",
                lineno + 1,
                2 + FACTOR_DIM,
                fields.len()
            )));
        }
        let identity_id: u32 = fields[1]
            .parse()
            .map_err(|_| Error::format(format!("manifest line {}: bad identity id", lineno + 1)))?;
        let mut factors = [0f64; FACTOR_DIM];
        for (k, f) in fields[2..].iter().enumerate() {
            factors[k] = f.parse().map_err(|_| {
                Error::format(format!("manifest line {}: bad factor field {k}", lineno + 1))
            })?;
        }
        let image = imageio::load_png(dir.join(fields[0]))?;
        resolution = image.dim().1;
        max_id = max_id.max(identity_id);
        entries.push(CorpusEntry {
            image,
            identity_id,
            factors: FactorVector(factors),
        });
    }
    if entries.is_empty() {
        return Err(Error::format("corpus manifest is empty"));
    }
    Ok(Corpus {
        entries,
        resolution,
        n_identities: max_id as usize + 1,
        seed,
    })
}
