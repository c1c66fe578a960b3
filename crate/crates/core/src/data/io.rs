//! On-disk dataset layout and the image, mask and soft-map file formats.
//!
//! ```text
//! root/
//!   images/<id>.png|.jpg
//!   masks/<id>.png        optional, indexed PNG, 0 = background
//!   landmarks.csv         optional, image_id,x1,y1,...,xK,yK
//!   classes.csv           optional, image_id,class
//!   train.txt val.txt test.txt
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::data::{Dataset, Splits};
use crate::error::{invalid, Error, Result};
use crate::types::{Image, PartMask};

/// Mask colors: background black, then red, green, blue, pink, cyan,
/// yellow, olive, purple.
pub const PALETTE: [[u8; 3]; 9] = [
    [0, 0, 0],
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 105, 180],
    [0, 255, 255],
    [255, 255, 0],
    [128, 128, 0],
    [128, 0, 128],
];

/// Palette color of a label; labels beyond the palette wrap around the
/// foreground colors.
pub fn label_color(label: u8) -> [u8; 3] {
    if label == 0 {
        PALETTE[0]
    } else {
        PALETTE[1 + (label as usize - 1) % (PALETTE.len() - 1)]
    }
}

fn image_err(path: &Path, reason: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Image::from_rgb8(h as usize, w as usize, img.as_raw())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

/// Writes an 8-bit RGB PNG.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_rgb_png(path, img.width(), img.height(), &img.to_rgb8())
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| image_err(path, e))?;
    w.write_image_data(rgb).map_err(|e| image_err(path, e))?;
    w.finish().map_err(|e| image_err(path, e))
}

/// Writes a label grid as an 8-bit indexed PNG with [`PALETTE`] colors.
pub fn write_mask_png(path: &Path, width: usize, height: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != width * height {
        return Err(invalid!("mask has {} labels, expected {width}x{height}", labels.len()));
    }
    ensure_parent(path)?;
    let max = labels.iter().copied().max().unwrap_or(0) as usize;
    let palette: Vec<u8> = (0..=max.max(PALETTE.len() - 1))
        .flat_map(|l| label_color(l as u8))
        .collect();
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), width as u32, height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette);
    let mut w = enc.write_header().map_err(|e| image_err(path, e))?;
    w.write_image_data(labels).map_err(|e| image_err(path, e))?;
    w.finish().map_err(|e| image_err(path, e))
}

pub fn write_part_mask(path: &Path, mask: &PartMask) -> Result<()> {
    write_mask_png(path, mask.width(), mask.height(), mask.labels())
}

/// Reads an 8-bit indexed or grayscale PNG as raw labels.
/// Returns `(height, width, labels)`.
pub fn read_mask_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(f));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| image_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| image_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
    {
        return Err(image_err(path, "masks must be 8-bit indexed or grayscale PNG"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let labels = (0..h)
        .flat_map(|r| buf[r * info.line_size..r * info.line_size + w].to_vec())
        .collect();
    Ok((h, w, labels))
}

pub const SOFT_MAP_MAGIC: &[u8; 4] = b"PDSM";

/// Writes a soft map: `"PDSM"`, then H, W, K+1 as little-endian u32, then
/// `H·W·(K+1)` little-endian f32 values in `(row, col, channel)` order.
pub fn write_soft_map(path: &Path, mask: &PartMask) -> Result<()> {
    let soft = mask.soft().ok_or_else(|| invalid!("mask carries no soft map"))?;
    ensure_parent(path)?;
    let mut bytes = Vec::with_capacity(16 + 4 * soft.len());
    bytes.extend_from_slice(SOFT_MAP_MAGIC);
    for v in [mask.height(), mask.width(), mask.k_parts() + 1] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in soft {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a soft map back as a [`PartMask`].
pub fn read_soft_map(path: &Path) -> Result<PartMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |r: &str| Error::CorruptArchive {
        path: path.to_path_buf(),
        reason: r.into(),
    };
    if bytes.len() < 16 || &bytes[..4] != SOFT_MAP_MAGIC {
        return Err(bad("not a soft map file"));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w, k1) = (u(4), u(8), u(12));
    if k1 < 2 || bytes.len() != 16 + 4 * h * w * k1 {
        return Err(bad("soft map size does not match its header"));
    }
    let soft = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    PartMask::from_soft(h, w, k1 - 1, soft)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn find_image(dir: &Path, id: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg", "PNG", "JPG"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

/// Parses `image_id,v1,v2,...` rows, skipping a header whose second field is
/// not numeric.
fn read_csv_rows(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let lines = read_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let mut fields = line.split(',').map(str::trim);
        let id = fields.next().unwrap_or_default().to_string();
        let rest: Vec<String> = fields.map(String::from).collect();
        if i == 0 && rest.first().is_some_and(|v| v.parse::<f64>().is_err()) {
            continue;
        }
        out.push((id, rest));
    }
    Ok(out)
}

/// Loads a dataset directory. All ids listed in the split files are loaded,
/// in train, val, test order.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut splits = Splits::default();
    for name in ["train", "val", "test"] {
        let path = root.join(format!("{name}.txt"));
        if !path.exists() {
            continue;
        }
        let mut list = Vec::new();
        for id in read_lines(&path)? {
            let i = *index.entry(id.clone()).or_insert_with(|| {
                ids.push(id.clone());
                ids.len() - 1
            });
            list.push(i);
        }
        match name {
            "train" => splits.train = list,
            "val" => splits.val = list,
            _ => splits.test = list,
        }
    }
    if ids.is_empty() {
        return Err(Error::Config(format!("{} has no train/val/test split files or they are empty", root.display())));
    }

    let img_dir = root.join("images");
    let images = ids
        .iter()
        .map(|id| {
            let p = find_image(&img_dir, id)
                .ok_or_else(|| Error::Config(format!("image for id '{id}' not found in {}", img_dir.display())))?;
            read_image(&p)
        })
        .collect::<Result<Vec<_>>>()?;

    let mask_dir = root.join("masks");
    let masks = if mask_dir.is_dir() {
        let m = ids
            .iter()
            .zip(&images)
            .map(|(id, img)| {
                let p = mask_dir.join(format!("{id}.png"));
                let (h, w, labels) = read_mask_png(&p)?;
                if (h, w) != img.size() {
                    return Err(Error::Config(format!("mask of '{id}' is {h}x{w}, image is {:?}", img.size())));
                }
                Ok(labels)
            })
            .collect::<Result<Vec<_>>>()?;
        Some(m)
    } else {
        None
    };

    let lm_path = root.join("landmarks.csv");
    let landmarks = if lm_path.exists() {
        let mut by_id: HashMap<String, Vec<[f64; 2]>> = HashMap::new();
        for (id, vals) in read_csv_rows(&lm_path)? {
            let nums = vals
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Config(format!("landmarks.csv row '{id}': {e}")))?;
            if nums.is_empty() || nums.len() % 2 != 0 {
                return Err(Error::Config(format!("landmarks.csv row '{id}' needs x,y pairs")));
            }
            by_id.insert(id, nums.chunks(2).map(|c| [c[0], c[1]]).collect());
        }
        let l = ids
            .iter()
            .map(|id| {
                by_id
                    .remove(id)
                    .ok_or_else(|| Error::Config(format!("landmarks.csv has no row for '{id}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(l)
    } else {
        None
    };

    let cls_path = root.join("classes.csv");
    let classes = if cls_path.exists() {
        let mut by_id = HashMap::new();
        for (id, vals) in read_csv_rows(&cls_path)? {
            let c: usize = vals
                .first()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("classes.csv row '{id}' needs a class index")))?;
            by_id.insert(id, c);
        }
        ids.iter()
            .map(|id| by_id.get(id).copied().ok_or_else(|| Error::Config(format!("classes.csv has no row for '{id}'"))))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![0; ids.len()]
    };

    let ds = Dataset {
        ids,
        images,
        classes,
        masks,
        landmarks,
        splits,
    };
    ds.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(ds)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes a dataset in the directory layout above.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(root.join("images")).map_err(|e| Error::io(root, e))?;
    for (id, img) in ds.ids.iter().zip(&ds.images) {
        write_image(&root.join("images").join(format!("{id}.png")), img)?;
    }
    if let Some(masks) = &ds.masks {
        for ((id, m), img) in ds.ids.iter().zip(masks).zip(&ds.images) {
            write_mask_png(&root.join("masks").join(format!("{id}.png")), img.width(), img.height(), m)?;
        }
    }
    if let Some(lms) = &ds.landmarks {
        let k = ds.k_landmarks().unwrap_or(0);
        let mut s = String::from("image_id");
        for i in 1..=k {
            s.push_str(&format!(",x{i},y{i}"));
        }
        s.push('\n');
        for (id, pts) in ds.ids.iter().zip(lms) {
            s.push_str(id);
            for p in pts {
                s.push_str(&format!(",{},{}", p[0], p[1]));
            }
            s.push('\n');
        }
        write_text(&root.join("landmarks.csv"), &s)?;
    }
    if ds.n_classes() > 1 {
        let mut s = String::from("image_id,class\n");
        for (id, c) in ds.ids.iter().zip(&ds.classes) {
            s.push_str(&format!("{id},{c}\n"));
        }
        write_text(&root.join("classes.csv"), &s)?;
    }
    for (name, list) in [("train", &ds.splits.train), ("val", &ds.splits.val), ("test", &ds.splits.test)] {
        let text: String = list.iter().map(|&i| format!("{}\n", ds.ids[i])).collect();
        write_text(&root.join(format!("{name}.txt")), &text)?;
    }
    Ok(())
}
