//! HSV conversions with all components in `[0, 1]`.

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let s = s.clamp(0.0, 1.0);
    let v = v.clamp(0.0, 1.0);
    let sector = h.floor();
    let f = h - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

/// Mean of hues on the unit circle, in `[0, 1)`.
pub fn circular_mean_hue(hues: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for h in hues {
        let a = h * std::f64::consts::TAU;
        sx += a.cos();
        sy += a.sin();
        n += 1;
    }
    if n == 0 {
        return None;
    }
    Some((sy.atan2(sx) / std::f64::consts::TAU).rem_euclid(1.0))
}

/// Shortest distance between two hues on the unit circle.
pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_primary_colours() {
        for h in [0.0, 1.0 / 6.0, 0.5, 0.75, 0.9] {
            let rgb = hsv_to_rgb(h, 0.6, 0.8);
            let hsv = rgb_to_hsv(rgb);
            assert!(hue_distance(hsv[0], h) < 1e-12);
            assert!((hsv[1] - 0.6).abs() < 1e-12);
            assert!((hsv[2] - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn circular_mean_wraps() {
        let m = circular_mean_hue([0.98, 0.02]).unwrap();
        assert!(hue_distance(m, 0.0) < 1e-12);
    }
}
