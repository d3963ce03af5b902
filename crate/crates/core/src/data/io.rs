//! Dataset directories: `index.csv`, `meta.txt`, binary PPM images and PGM
//! masks.

use std::fs;
use std::path::{Path, PathBuf};

use super::scene::{parse_num, SceneSpec, SyntheticSample};
use crate::blocks::parse_key_values;
use crate::error::{Error, Result};
use crate::losses::AttributeLabels;
use crate::tensor::{read_all, Tensor};

pub const INDEX_HEADER: &str = "id,labels,seed";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub attributes: usize,
    pub height: usize,
    pub width: usize,
    /// Generator settings, when the data is synthetic.
    pub spec: Option<SceneSpec>,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn from_samples(spec: Option<SceneSpec>, samples: Vec<SyntheticSample>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Config("dataset is empty".into()))?;
        let (attributes, height, width) = (first.labels.len(), first.height(), first.width());
        if let Some(s) = samples
            .iter()
            .find(|s| s.labels.len() != attributes || s.height() != height || s.width() != width)
        {
            return Err(Error::Shape(format!("sample {} differs in size or attribute count", s.id)));
        }
        Ok(Dataset {
            attributes,
            height,
            width,
            spec,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<AttributeLabels> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }

    pub fn find(&self, id: &str) -> Option<&SyntheticSample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Binary PPM (P6) of a `[3, H, W]` tensor with values in `[0, 1]`.
pub fn encode_ppm(image: &Tensor<f32>) -> Vec<u8> {
    let s = image.shape();
    assert!(s.len() == 3 && s[0] == 3, "expected [3, H, W], got {s:?}");
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push(quantize(d[c * h * w + i]));
        }
    }
    out
}

/// Binary PGM (P5) of a `[1, H, W]` tensor with values in `[0, 1]`.
pub fn encode_pgm(plane: &Tensor<f32>) -> Vec<u8> {
    let s = plane.shape();
    assert!(s.len() == 3 && s[0] == 1, "expected [1, H, W], got {s:?}");
    let mut out = format!("P5\n{} {}\n255\n", s[2], s[1]).into_bytes();
    out.extend(plane.data().iter().map(|&v| quantize(v)));
    out
}

struct PnmCursor<'a> {
    file: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl PnmCursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.file, self.pos, msg)
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected a decimal number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(self.file, start, "number out of range"))
    }
}

/// Parses a P5/P6 file into `[channels, H, W]` with values `k / 255`.
fn decode_pnm(file: &Path, bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<Tensor<f32>> {
    let mut cur = PnmCursor { file, bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(cur.err(format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    cur.pos = 2;
    let w = cur.number()?;
    let h = cur.number()?;
    let max = cur.number()?;
    if w == 0 || h == 0 {
        return Err(cur.err("zero image extent"));
    }
    if max != 255 {
        return Err(cur.err(format!("only maxval 255 is supported, got {max}")));
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("expected a single whitespace byte before pixel data"));
    }
    cur.pos += 1;
    let need = channels * h * w;
    let data = &bytes[cur.pos..];
    if data.len() < need {
        return Err(Error::parse(file, bytes.len(), format!("truncated pixel data: {} of {need} bytes", data.len())));
    }
    if data.len() > need {
        return Err(Error::parse(file, cur.pos + need, "trailing bytes after pixel data"));
    }
    let mut out = vec![0f32; need];
    for i in 0..h * w {
        for c in 0..channels {
            out[c * h * w + i] = data[i * channels + c] as f32 / 255.0;
        }
    }
    Tensor::new(&[channels, h, w], out)
}

pub fn decode_ppm(file: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    decode_pnm(file, bytes, b"P6", 3)
}

pub fn decode_pgm(file: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    decode_pnm(file, bytes, b"P5", 1)
}

pub fn write_pgm(path: &Path, plane: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_pgm(plane))?;
    Ok(())
}

fn meta_text(ds: &Dataset) -> String {
    let mut s = format!(
        "attributes={}\nheight={}\nwidth={}\ncount={}\n",
        ds.attributes,
        ds.height,
        ds.width,
        ds.samples.len()
    );
    if let Some(spec) = &ds.spec {
        for line in spec.to_text().lines() {
            s.push_str("spec.");
            s.push_str(line);
            s.push('\n');
        }
    }
    s
}

pub fn index_text(samples: &[SyntheticSample]) -> String {
    let mut s = String::from(INDEX_HEADER);
    s.push('\n');
    for x in samples {
        s.push_str(&format!("{},{},{}\n", x.id, x.labels, x.seed));
    }
    s
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    fs::write(dir.join("meta.txt"), meta_text(ds))?;
    fs::write(dir.join("index.csv"), index_text(&ds.samples))?;
    for s in &ds.samples {
        fs::write(dir.join("images").join(format!("{}.ppm", s.id)), encode_ppm(&s.image))?;
        fs::write(dir.join("masks").join(format!("{}.pgm", s.id)), encode_pgm(&s.mask))?;
    }
    Ok(())
}

struct IndexRow {
    id: String,
    labels: AttributeLabels,
    seed: u64,
}

fn parse_index(file: &Path, text: &str, attributes: usize) -> Result<Vec<IndexRow>> {
    let mut rows = Vec::new();
    let mut offset = 0usize;
    for (n, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len();
        let line = line.trim_end_matches(['\n', '\r']);
        if n == 0 {
            if line != INDEX_HEADER {
                return Err(Error::parse(file, start, format!("expected header {INDEX_HEADER:?}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::parse(file, start, format!("expected 3 fields, got {}", fields.len())));
        }
        let labels_at = start + fields[0].len() + 1;
        let seed_at = labels_at + fields[1].len() + 1;
        if fields[0].is_empty() || !fields[0].bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-') {
            return Err(Error::parse(file, start, format!("invalid id {:?}", fields[0])));
        }
        let labels: AttributeLabels = fields[1].parse().map_err(|e: Error| Error::parse(file, labels_at, e.to_string()))?;
        if labels.len() != attributes {
            return Err(Error::parse(file, labels_at, format!("{} labels, expected {attributes}", labels.len())));
        }
        let seed = fields[2].parse().map_err(|_| Error::parse(file, seed_at, format!("invalid seed {:?}", fields[2])))?;
        rows.push(IndexRow {
            id: fields[0].to_string(),
            labels,
            seed,
        });
    }
    if rows.is_empty() && offset == 0 {
        return Err(Error::parse(file, 0, "empty index"));
    }
    Ok(rows)
}

struct Meta {
    attributes: usize,
    height: usize,
    width: usize,
    count: usize,
    spec: Option<SceneSpec>,
}

fn parse_meta(file: &Path, text: &str) -> Result<Meta> {
    let wrap = |e: Error| Error::parse(file, 0, e.to_string());
    let kv = parse_key_values(text).map_err(wrap)?;
    let get = |k: &str| -> Result<usize> {
        let v = kv
            .iter()
            .find(|(key, _)| key == k)
            .ok_or_else(|| Error::parse(file, 0, format!("missing key {k}")))?;
        parse_num(&v.1, k).map_err(wrap)
    };
    let spec_lines: Vec<String> = kv
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("spec.").map(|k| format!("{k}={v}")))
        .collect();
    let spec = if spec_lines.is_empty() {
        None
    } else {
        Some(SceneSpec::from_text(&spec_lines.join("\n")).map_err(wrap)?)
    };
    Ok(Meta {
        attributes: get("attributes")?,
        height: get("height")?,
        width: get("width")?,
        count: get("count")?,
        spec,
    })
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = read_all(path)?;
    String::from_utf8(bytes).map_err(|e| Error::parse(path, e.utf8_error().valid_up_to(), "invalid UTF-8"))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.txt");
    let meta = parse_meta(&meta_path, &read_text(&meta_path)?)?;
    let index_path = dir.join("index.csv");
    let rows = parse_index(&index_path, &read_text(&index_path)?, meta.attributes)?;
    if rows.len() != meta.count {
        return Err(Error::parse(&index_path, 0, format!("{} rows but meta.txt declares {}", rows.len(), meta.count)));
    }
    let mut samples = Vec::with_capacity(rows.len());
    for row in rows {
        let img_path: PathBuf = dir.join("images").join(format!("{}.ppm", row.id));
        let image = decode_ppm(&img_path, &read_all(&img_path)?)?;
        let mask_path = dir.join("masks").join(format!("{}.pgm", row.id));
        let mask = decode_pgm(&mask_path, &read_all(&mask_path)?)?;
        for (p, t) in [(&img_path, &image), (&mask_path, &mask)] {
            if t.shape()[1..] != [meta.height, meta.width] {
                return Err(Error::parse(p, 0, format!("size {:?} differs from meta {}x{}", &t.shape()[1..], meta.height, meta.width)));
            }
        }
        samples.push(SyntheticSample {
            id: row.id,
            image,
            mask,
            labels: row.labels,
            seed: row.seed,
            meta: None,
        });
    }
    Ok(Dataset {
        attributes: meta.attributes,
        height: meta.height,
        width: meta.width,
        spec: meta.spec,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_and_layout() {
        let img = Tensor::from_fn(&[3, 2, 3], |i| i as f32 / 255.0);
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        // interleaved: pixel 0 = (0, 6, 12)
        assert_eq!(&bytes[11..14], &[0, 6, 12]);
        assert_eq!(decode_ppm(Path::new("x.ppm"), &bytes).unwrap(), img);
    }

    #[test]
    fn pnm_header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let t = decode_pgm(Path::new("c.pgm"), bytes).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn truncated_image_names_file() {
        let mut bytes = encode_ppm(&Tensor::full(&[3, 4, 4], 0.5));
        bytes.truncate(bytes.len() - 5);
        let err = decode_ppm(Path::new("images/000001.ppm"), &bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("images/000001.ppm") && msg.contains("truncated"), "{msg}");
    }

    #[test]
    fn index_errors_point_at_the_field() {
        let text = "id,labels,seed\n000000,10u,5\n000001,1x0,6\n";
        match parse_index(Path::new("index.csv"), text, 3) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, text.find("1x0").unwrap()),
            other => panic!("unexpected {:?}", other.map(|r| r.len())),
        }
    }
}
