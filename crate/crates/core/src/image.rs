//! RGB float images and their PPM (P3) / PNG serialization.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with 64-bit channels, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f64; 3]) {
        self.data[y * self.width + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn check_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }

    /// Samples pixel `offset` of every `stride`-block (no filtering), the
    /// same pixels a strided [`PixelGrid`](crate::camera::PixelGrid) renders.
    pub fn subsample(&self, stride: usize, offset: usize) -> Image {
        let stride = stride.max(1);
        assert!(offset < stride, "offset must lie inside a block");
        Image::from_fn(self.width / stride, self.height / stride, |x, y| {
            self.get(stride * x + offset, stride * y + offset)
        })
    }

    /// One channel as a flat row-major plane.
    pub fn channel(&self, ch: usize) -> Vec<f64> {
        self.data.iter().map(|p| p[ch]).collect()
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f64::max)
    }

    pub fn load(path: &Path) -> Result<Self> {
        match extension(path).as_deref() {
            Some("png") => read_png(path),
            Some("ppm") => {
                let text =
                    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
                parse_ppm(&text).map_err(|message| Error::Parse {
                    path: path.to_path_buf(),
                    message,
                })
            }
            _ => Err(Error::InvalidInput(format!(
                "unsupported image format for {} (expected .png or .ppm)",
                path.display()
            ))),
        }
    }

    /// Writes an 8-bit PNG or ASCII PPM depending on the extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        match extension(path).as_deref() {
            Some("png") => write_png(self, path),
            Some("ppm") => {
                fs::write(path, self.to_ppm()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
            }
            _ => Err(Error::InvalidInput(format!(
                "unsupported image format for {} (expected .png or .ppm)",
                path.display()
            ))),
        }
    }

    pub fn to_ppm(&self) -> String {
        let mut out = format!("P3\n{} {}\n255\n", self.width, self.height);
        for row in self.data.chunks(self.width.max(1)) {
            let line: Vec<String> = row
                .iter()
                .flat_map(|p| p.iter().map(|&v| to_u8(v).to_string()))
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn parse_ppm(text: &str) -> std::result::Result<Image, String> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P3") {
        return Err("missing P3 magic".into());
    }
    let mut next_num = |what: &str| -> std::result::Result<usize, String> {
        tokens
            .next()
            .ok_or_else(|| format!("unexpected end of file reading {what}"))?
            .parse::<usize>()
            .map_err(|e| format!("bad {what}: {e}"))
    };
    let width = next_num("width")?;
    let height = next_num("height")?;
    let maxval = next_num("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    let mut data = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        let mut px = [0.0; 3];
        for v in &mut px {
            let raw = next_num("sample")?;
            if raw > maxval {
                return Err(format!("sample {raw} exceeds maxval {maxval}"));
            }
            *v = raw as f64 / maxval as f64;
        }
        data.push(px);
    }
    Ok(Image { width, height, data })
}

fn read_png(path: &Path) -> Result<Image> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| parse_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| parse_err("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| parse_err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let bytes = &buf[..info.buffer_size()];
    let data = bytes
        .chunks(channels)
        .map(|px| {
            let f = |i: usize| px[i] as f64 / 255.0;
            match channels {
                1 | 2 => [f(0); 3],
                _ => [f(0), f(1), f(2)],
            }
        })
        .collect::<Vec<_>>();
    if data.len() != w * h {
        return Err(parse_err(format!("decoded {} pixels, expected {}", data.len(), w * h)));
    }
    Ok(Image {
        width: w,
        height: h,
        data,
    })
}

fn write_png(img: &Image, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(format!("writing {}", path.display()), std::io::Error::other(e));
    let mut writer = encoder.write_header().map_err(to_io)?;
    let bytes: Vec<u8> = img.data.iter().flat_map(|p| p.map(to_u8)).collect();
    writer.write_image_data(&bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image() -> Image {
        Image::from_fn(5, 3, |x, y| [x as f64 / 4.0, y as f64 / 2.0, ((x + y) % 2) as f64])
    }

    #[test]
    fn ppm_round_trip_quantizes_to_8_bit() {
        let img = gradient_image();
        let back = parse_ppm(&img.to_ppm()).unwrap();
        assert_eq!(back.dims(), (5, 3));
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn ppm_with_comments_and_other_maxval() {
        let img = parse_ppm("P3\n# comment\n2 1\n15\n15 0 0  0 15 0\n").unwrap();
        assert_eq!(img.data, vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(parse_ppm("P6\n1 1\n255\n").is_err());
        assert!(parse_ppm("P3\n2 2\n255\n0 0 0\n").is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = gradient_image();
        img.save(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn unknown_extension_is_rejected() {
        let img = gradient_image();
        assert!(matches!(img.save(Path::new("x.bmp")), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn subsample_picks_block_centres() {
        let img = Image::from_fn(8, 8, |x, y| [x as f64, y as f64, 0.0]);
        let s = img.subsample(4, 2);
        assert_eq!(s.dims(), (2, 2));
        assert_eq!(s.get(1, 0), [6.0, 2.0, 0.0]);
    }
}
