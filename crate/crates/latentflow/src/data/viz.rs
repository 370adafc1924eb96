//! Flow-to-color rendering: direction becomes hue, magnitude becomes
//! saturation, so zero flow is white.

use super::{FlowField, Image};

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h_deg.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
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

/// Color-codes a field as 8-bit RGB, row-major [h, w, 3]. Saturation is
/// scaled by `max_mag` when given, else by the 99th-percentile magnitude.
pub fn flow_to_rgb(field: &FlowField, max_mag: Option<f64>) -> Vec<u8> {
    let mags: Vec<f64> = field
        .flow
        .chunks(2)
        .map(|f| ((f[0] as f64).powi(2) + (f[1] as f64).powi(2)).sqrt())
        .collect();
    let scale = match max_mag {
        Some(m) if m > 0.0 => m,
        _ => {
            let mut sorted = mags.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let p99 = sorted[((sorted.len() - 1) as f64 * 0.99).round() as usize];
            if p99 > 0.0 {
                p99
            } else {
                1.0
            }
        }
    };
    let mut out = Vec::with_capacity(field.h * field.w * 3);
    for (i, f) in field.flow.chunks(2).enumerate() {
        let hue = (f[1] as f64).atan2(f[0] as f64).to_degrees();
        let sat = (mags[i] / scale).clamp(0.0, 1.0);
        let rgb = hsv_to_rgb(hue, sat, 1.0);
        for c in rgb {
            out.push((c * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn flow_to_image(field: &FlowField, max_mag: Option<f64>) -> Image {
    let bytes = flow_to_rgb(field, max_mag);
    Image { h: field.h, w: field.w, rgb: bytes.iter().map(|&b| b as f32 / 255.0).collect() }
}
