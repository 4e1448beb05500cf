//! ASCII PLY scene files.
//!
//! Layout (LF line endings, single spaces between fields):
//!
//! ```text
//! ply
//! format ascii 1.0
//! element vertex <N>
//! property float x
//! property float y
//! property float z
//! property uchar red
//! property uchar green
//! property uchar blue
//! property uchar label
//! end_header
//! <x> <y> <z> <red> <green> <blue> <label>      (N lines)
//! ```
//!
//! Coordinates are written as the shortest decimal that parses back to the
//! same `f32`; colors are `round(255 * c)`; labels are codes `0..=11`.
//! `comment` lines are accepted anywhere in the header.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cloud::{LabeledPointCloud, Point, Vec3};
use crate::error::{Error, Result};
use crate::label::SemanticLabel;

const PROPERTIES: [&str; 7] = [
    "property float x",
    "property float y",
    "property float z",
    "property uchar red",
    "property uchar green",
    "property uchar blue",
    "property uchar label",
];

pub fn color_to_u8(c: f32) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_scene(cloud: &LabeledPointCloud) -> String {
    let mut out = String::with_capacity(200 + cloud.len() * 40);
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    for p in PROPERTIES {
        out.push_str(p);
        out.push('\n');
    }
    out.push_str("end_header\n");
    for p in cloud {
        let [r, g, b] = p.color.map(color_to_u8);
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {}",
            p.position.x as f32,
            p.position.y as f32,
            p.position.z as f32,
            r,
            g,
            b,
            p.label.code()
        );
    }
    out
}

struct Lines<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Lines<'a> {
    /// Next line with its starting byte offset, without the terminator.
    fn next_line(&mut self) -> Option<(usize, &'a str)> {
        if self.pos >= self.text.len() {
            return None;
        }
        let start = self.pos;
        let rest = &self.text[start..];
        let (line, advance) = match rest.find('\n') {
            Some(i) => (&rest[..i], i + 1),
            None => (rest, rest.len()),
        };
        self.pos += advance;
        Some((start, line.strip_suffix('\r').unwrap_or(line)))
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

pub fn decode_scene(text: &str) -> Result<LabeledPointCloud> {
    let mut lines = Lines { text, pos: 0 };
    let mut header = || -> Result<(usize, &str)> {
        loop {
            match lines.next_line() {
                Some((_, l)) if l.starts_with("comment") => continue,
                Some(x) => return Ok(x),
                None => return Err(parse_err(text.len(), "unexpected end of header")),
            }
        }
    };
    let expect = |(off, line): (usize, &str), want: &str| -> Result<()> {
        if line.trim_end() == want {
            Ok(())
        } else {
            Err(parse_err(off, format!("expected `{want}`, found `{line}`")))
        }
    };
    expect(header()?, "ply")?;
    expect(header()?, "format ascii 1.0")?;
    let (off, line) = header()?;
    let count: usize = line
        .strip_prefix("element vertex ")
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| parse_err(off, format!("expected `element vertex <N>`, found `{line}`")))?;
    for p in PROPERTIES {
        expect(header()?, p)?;
    }
    expect(header()?, "end_header")?;

    let mut cloud = LabeledPointCloud::with_capacity(count);
    for i in 0..count {
        let (off, line) = lines
            .next_line()
            .ok_or_else(|| parse_err(text.len(), format!("truncated payload: vertex {i} of {count} missing")))?;
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.len() != 7 {
            return Err(parse_err(off, format!("vertex {i}: expected 7 fields, found {}", fields.len())));
        }
        let mut xyz = [0f64; 3];
        for k in 0..3 {
            let v: f32 = fields[k]
                .parse()
                .map_err(|_| parse_err(off, format!("vertex {i}: bad coordinate `{}`", fields[k])))?;
            if !v.is_finite() {
                return Err(parse_err(off, format!("vertex {i}: non-finite coordinate")));
            }
            xyz[k] = v as f64;
        }
        let mut bytes = [0u8; 4];
        for k in 0..4 {
            bytes[k] = fields[3 + k]
                .parse()
                .map_err(|_| parse_err(off, format!("vertex {i}: bad uchar `{}`", fields[3 + k])))?;
        }
        let label = SemanticLabel::new(bytes[3])
            .map_err(|_| parse_err(off, format!("vertex {i}: unknown label code {}", bytes[3])))?;
        cloud.push(Point {
            position: Vec3::new(xyz[0], xyz[1], xyz[2]),
            color: [bytes[0], bytes[1], bytes[2]].map(|b| b as f32 / 255.0),
            label,
        });
    }
    while let Some((off, line)) = lines.next_line() {
        if !line.trim().is_empty() {
            return Err(parse_err(off, "unexpected data after the last vertex"));
        }
    }
    Ok(cloud)
}

pub fn save_scene(cloud: &LabeledPointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_scene(cloud)).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<LabeledPointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| parse_err(e.valid_up_to(), "file is not valid UTF-8"))?;
    decode_scene(text)
}
