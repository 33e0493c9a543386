//! Binary PPM/PGM images and the CSV patch index.

use std::fs;
use std::path::{Path, PathBuf};

use sassl_core::synth::{Dataset, Patch};
use sassl_core::Tensor;

use crate::error::{CliError, Result};

/// Header columns of a patch index.
pub const INDEX_HEADER: [&str; 5] = [
    "path",
    "slide_id",
    "class_id",
    "content_fraction",
    "mask_path",
];

/// Decoded 8-bit image: `channels` is 3 for PPM and 1 for PGM, samples are
/// interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

fn encode(magic: &str, img: &Image) -> Vec<u8> {
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.samples);
    out
}

/// `P6` bytes for an RGB image.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    debug_assert_eq!(img.channels, 3);
    encode("P6", img)
}

/// `P5` bytes for a grey image.
pub fn encode_pgm(img: &Image) -> Vec<u8> {
    debug_assert_eq!(img.channels, 1);
    encode("P5", img)
}

/// Parses a binary netpbm image; `magic` is `P6` or `P5`. Comments in the
/// header are skipped and maxval must be 255.
pub fn decode_netpbm(bytes: &[u8], magic: &str) -> std::result::Result<Image, String> {
    let channels = match magic {
        "P6" => 3,
        "P5" => 1,
        _ => return Err(format!("unsupported magic {magic}")),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != magic {
        return Err(format!("bad magic {:?}, expected {magic}", fields[0]));
    }
    let num = |i: usize, what: &str| -> std::result::Result<usize, String> {
        fields[i]
            .parse::<usize>()
            .map_err(|_| format!("bad {what} {:?}", fields[i]))
    };
    let width = num(1, "width")?;
    let height = num(2, "height")?;
    let maxval = num(3, "maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("bad dimensions {width}x{height}"));
    }
    if maxval != 255 {
        return Err(format!("maxval {maxval}, expected 255"));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("truncated header".into());
    }
    pos += 1;
    let n = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() != n {
        return Err(format!(
            "raster has {} bytes, {width}x{height} needs {n}",
            raster.len()
        ));
    }
    Ok(Image {
        width,
        height,
        channels,
        samples: raster.to_vec(),
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Planar `[3, H, W]` pixels in `[0, 1]` to an interleaved RGB image.
pub fn tensor_to_image(pixels: &Tensor) -> Image {
    let s = pixels.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = pixels.data();
    let mut samples = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            samples.push(quantize(d[c * plane + i]));
        }
    }
    Image {
        width: w,
        height: h,
        channels: 3,
        samples,
    }
}

/// Interleaved RGB to planar `[3, H, W]`, bytes divided by 255.
pub fn image_to_tensor(img: &Image) -> Tensor {
    let plane = img.width * img.height;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.samples.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[3, img.height, img.width], data).expect("sizes agree")
}

pub fn mask_to_image(mask: &[u8], size: usize) -> Image {
    Image {
        width: size,
        height: size,
        channels: 1,
        samples: mask.iter().map(|&m| if m > 0 { 255 } else { 0 }).collect(),
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes a patch as `<stem>.ppm` plus `<stem>_mask.pgm` under `dir` and
/// returns both file names relative to `dir`.
pub fn write_patch(dir: &Path, stem: &str, patch: &Patch) -> Result<(String, String)> {
    let image = format!("{stem}.ppm");
    let mask = format!("{stem}_mask.pgm");
    write_file(
        &dir.join(&image),
        &encode_ppm(&tensor_to_image(&patch.pixels)),
    )?;
    write_file(
        &dir.join(&mask),
        &encode_pgm(&mask_to_image(&patch.mask, patch.size())),
    )?;
    Ok((image, mask))
}

/// Writes every patch plus `index.csv` under `dir`; returns the index path.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    let mut per_slide = std::collections::BTreeMap::<u32, usize>::new();
    let mut rows = Vec::with_capacity(dataset.len());
    for p in &dataset.patches {
        let j = per_slide.entry(p.slide_id).or_default();
        let stem = format!("slide_{:03}/patch_{:04}", p.slide_id, j);
        *j += 1;
        let (image, mask) = write_patch(dir, &stem, p)?;
        rows.push([
            image,
            p.slide_id.to_string(),
            p.content_label.to_string(),
            p.content_fraction.to_string(),
            mask,
        ]);
    }
    let index = dir.join("index.csv");
    let mut w = csv_writer(Vec::new());
    w.write_record(INDEX_HEADER).expect("in-memory write");
    for r in &rows {
        w.write_record(r).expect("in-memory write");
    }
    write_file(&index, &w.into_inner().expect("in-memory flush"))?;
    Ok(index)
}

/// CSV writer with LF line endings.
pub fn csv_writer<W: std::io::Write>(inner: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(inner)
}

fn read_image(path: &Path, magic: &str) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_netpbm(&bytes, magic).map_err(|m| CliError::data(format!("{}: {m}", path.display())))
}

/// Loads the patches listed in a CSV index. Relative paths resolve against
/// the index's directory.
pub fn ingest_patches(index: &Path) -> Result<Dataset> {
    let base = index.parent().unwrap_or(Path::new(""));
    let text = fs::read(index).map_err(|e| CliError::io(index, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_slice());
    let where_ = |line: usize| format!("{} line {line}", index.display());
    let headers = reader
        .headers()
        .map_err(|e| CliError::data(format!("{}: {e}", index.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != INDEX_HEADER {
        return Err(CliError::data(format!(
            "{}: header must be {}",
            index.display(),
            INDEX_HEADER.join(",")
        )));
    }
    let mut patches = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| CliError::data(format!("{}: {e}", where_(line))))?;
        if rec.len() != INDEX_HEADER.len() {
            return Err(CliError::data(format!(
                "{}: expected {} fields, got {}",
                where_(line),
                INDEX_HEADER.len(),
                rec.len()
            )));
        }
        let field = |k: usize| rec[k].trim();
        let slide_id: u32 = field(1).parse().map_err(|_| {
            CliError::data(format!("{}: bad slide_id {:?}", where_(line), field(1)))
        })?;
        let class: usize = field(2).parse().map_err(|_| {
            CliError::data(format!("{}: bad class_id {:?}", where_(line), field(2)))
        })?;
        let fraction: f64 = field(3).parse().map_err(|_| {
            CliError::data(format!(
                "{}: bad content_fraction {:?}",
                where_(line),
                field(3)
            ))
        })?;
        if !(0.0..=1.0).contains(&fraction) {
            return Err(CliError::data(format!(
                "{}: content_fraction {fraction} outside [0,1]",
                where_(line)
            )));
        }
        let img_path = base.join(field(0));
        let img = read_image(&img_path, "P6")?;
        if img.width != img.height {
            return Err(CliError::data(format!(
                "{}: patch is {}x{}, expected a square",
                img_path.display(),
                img.width,
                img.height
            )));
        }
        let mask = if field(4).is_empty() {
            Vec::new()
        } else {
            let mask_path = base.join(field(4));
            let m = read_image(&mask_path, "P5")?;
            if (m.width, m.height) != (img.width, img.height) {
                return Err(CliError::data(format!(
                    "{}: mask is {}x{}, patch is {}x{}",
                    mask_path.display(),
                    m.width,
                    m.height,
                    img.width,
                    img.height
                )));
            }
            if let Some(v) = m.samples.iter().find(|&&v| v != 0 && v != 255) {
                return Err(CliError::data(format!(
                    "{}: mask value {v} is neither 0 nor 255",
                    mask_path.display()
                )));
            }
            m.samples.iter().map(|&v| u8::from(v == 255)).collect()
        };
        if let Some(first) = patches.first().map(|p: &Patch| p.size()) {
            if first != img.width {
                return Err(CliError::data(format!(
                    "{}: patch side {} differs from {first}",
                    img_path.display(),
                    img.width
                )));
            }
        }
        patches.push(Patch {
            pixels: image_to_tensor(&img),
            slide_id,
            content_label: class,
            content_fraction: fraction,
            mask,
        });
    }
    if patches.is_empty() {
        return Err(CliError::data(format!("{}: no patches", index.display())));
    }
    Ok(Dataset::new(patches))
}
