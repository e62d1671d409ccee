//! Activation fixtures produced by an independent implementation.
//!
//! Text format, one record per line, fields separated by spaces, `#`
//! starting a comment line:
//!
//! ```text
//! elpips-fixture 1
//! architecture vgg16
//! tolerance 1e-4
//! image <h> <w> <hex of h·w·3 little-endian f32>
//! layer <index> <h> <w> <c> <sum of activations>
//! value <layer> <y> <x> <c> <hex of one little-endian f32>
//! pair-image <h> <w> <hex>          (optional)
//! reference-distance <value>        (optional, plain metric, image vs pair-image)
//! skip <reason>                     (the producer could not run)
//! ```

use std::path::Path;

use elpips_core::convnet::{forward_features, ArchitectureId, WeightContainer};
use elpips_core::metric::lpips_distance;
use elpips_core::Tensor;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub index: usize,
    pub shape: [usize; 3],
    pub checksum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueRecord {
    pub layer: usize,
    pub y: usize,
    pub x: usize,
    pub c: usize,
    pub value: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationFixture {
    pub architecture: ArchitectureId,
    pub tolerance: f32,
    pub image: Tensor,
    pub layers: Vec<LayerRecord>,
    pub values: Vec<ValueRecord>,
    pub pair_image: Option<Tensor>,
    pub reference_distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Fixture {
    Ready(Box<ActivationFixture>),
    Skipped(String),
}

fn bad(line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("fixture line {line}: {msg}"))
}

fn num<T: std::str::FromStr>(line: usize, s: Option<&str>, what: &str) -> CliResult<T> {
    s.and_then(|s| s.parse().ok()).ok_or_else(|| bad(line, format!("missing or invalid {what}")))
}

fn floats(line: usize, hex_text: Option<&str>, count: usize) -> CliResult<Vec<f32>> {
    let bytes = hex::decode(hex_text.unwrap_or("")).map_err(|e| bad(line, e))?;
    if bytes.len() != count * 4 {
        return Err(bad(line, format!("payload has {} bytes, expected {}", bytes.len(), count * 4)));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect())
}

fn image_record(line: usize, f: &mut std::str::SplitWhitespace<'_>) -> CliResult<Tensor> {
    let h: usize = num(line, f.next(), "height")?;
    let w: usize = num(line, f.next(), "width")?;
    let data = floats(line, f.next(), h * w * 3)?;
    Tensor::new(&[h, w, 3], data).map_err(|e| bad(line, e))
}

pub fn parse_fixture(text: &str) -> CliResult<Fixture> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some((_, "elpips-fixture 1")) => {}
        Some((n, other)) => return Err(bad(n, format!("unsupported header `{other}`"))),
        None => return Err(CliError::Input("fixture is empty".into())),
    }
    let (mut arch, mut tol, mut image, mut pair, mut reference) = (None, 1e-4f32, None, None, None);
    let (mut layers, mut values) = (Vec::new(), Vec::new());
    for (n, line) in lines {
        let mut f = line.split_whitespace();
        match f.next() {
            Some("skip") => return Ok(Fixture::Skipped(f.collect::<Vec<_>>().join(" "))),
            Some("architecture") => {
                let s = f.next().unwrap_or("");
                arch = Some(s.parse::<ArchitectureId>().map_err(|e| bad(n, e))?);
            }
            Some("tolerance") => tol = num(n, f.next(), "tolerance")?,
            Some("image") => image = Some(image_record(n, &mut f)?),
            Some("pair-image") => pair = Some(image_record(n, &mut f)?),
            Some("reference-distance") => reference = Some(num(n, f.next(), "distance")?),
            Some("layer") => layers.push(LayerRecord {
                index: num(n, f.next(), "layer index")?,
                shape: [num(n, f.next(), "height")?, num(n, f.next(), "width")?, num(n, f.next(), "channels")?],
                checksum: num(n, f.next(), "checksum")?,
            }),
            Some("value") => values.push(ValueRecord {
                layer: num(n, f.next(), "layer")?,
                y: num(n, f.next(), "y")?,
                x: num(n, f.next(), "x")?,
                c: num(n, f.next(), "channel")?,
                value: floats(n, f.next(), 1)?[0],
            }),
            Some(other) => return Err(bad(n, format!("unknown record `{other}`"))),
            None => {}
        }
    }
    Ok(Fixture::Ready(Box::new(ActivationFixture {
        architecture: arch.ok_or_else(|| CliError::Input("fixture has no architecture".into()))?,
        tolerance: tol,
        image: image.ok_or_else(|| CliError::Input("fixture has no image".into()))?,
        layers,
        values,
        pair_image: pair,
        reference_distance: reference,
    })))
}

pub fn load_fixture(path: &Path) -> CliResult<Fixture> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_fixture(&text)
}

/// Comparison of a local forward pass against a fixture.
#[derive(Clone, Debug, PartialEq)]
pub struct FixtureReport {
    pub values_checked: usize,
    pub max_abs_error: f32,
    pub within_tolerance: bool,
    pub layer_shapes_match: bool,
    /// Relative error of the plain distance, when the fixture records one.
    pub distance_rel_error: Option<f64>,
}

pub fn check_fixture(fixture: &ActivationFixture, weights: &WeightContainer) -> CliResult<FixtureReport> {
    if weights.architecture().id() != fixture.architecture {
        return Err(CliError::Input(format!(
            "fixture is for {}, weights are {}",
            fixture.architecture,
            weights.architecture().id()
        )));
    }
    let stack = forward_features(&fixture.image, weights, None)?;
    let layer_shapes_match = fixture.layers.iter().all(|l| {
        stack
            .layers
            .get(l.index)
            .is_some_and(|t| t.shape() == l.shape)
    });
    let mut max_abs_error = 0.0f32;
    for v in &fixture.values {
        let t = stack
            .layers
            .get(v.layer)
            .ok_or_else(|| CliError::Input(format!("fixture refers to missing layer {}", v.layer)))?;
        let (h, w, c) = t.hwc()?;
        if v.y >= h || v.x >= w || v.c >= c {
            return Err(CliError::Input(format!("fixture coordinate out of range in layer {}", v.layer)));
        }
        max_abs_error = max_abs_error.max((t.at(v.y, v.x, v.c) - v.value).abs());
    }
    let distance_rel_error = match (&fixture.pair_image, fixture.reference_distance) {
        (Some(pair), Some(reference)) => {
            let other = forward_features(pair, weights, None)?;
            let d = lpips_distance(&stack, &other, weights)?;
            Some((d - reference).abs() / reference.abs().max(f64::MIN_POSITIVE))
        }
        _ => None,
    };
    Ok(FixtureReport {
        values_checked: fixture.values.len(),
        max_abs_error,
        within_tolerance: max_abs_error <= fixture.tolerance,
        layer_shapes_match,
        distance_rel_error,
    })
}
