//! Colored ASCII PLY export for viewing predictions.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{ensure, Context, Result};

const SEMANTIC_COLORS: [[u8; 3]; 2] = [[150, 150, 150], [40, 170, 60]];

/// Gray for background classes, green for siliques; other classes cycle.
pub fn semantic_color(class: u32) -> [u8; 3] {
    SEMANTIC_COLORS
        .get(class as usize)
        .copied()
        .unwrap_or_else(|| instance_color(class as i32))
}

/// Well-separated hues by golden-ratio stepping; unassigned points are gray.
pub fn instance_color(id: i32) -> [u8; 3] {
    if id < 0 {
        return [150, 150, 150];
    }
    let h = (id as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|c| (40.0 + 200.0 * c) as u8)
}

pub fn format_ply(coords: &[[f64; 3]], colors: &[[u8; 3]]) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        coords.len()
    );
    for (p, c) in coords.iter().zip(colors) {
        let _ = writeln!(s, "{:?} {:?} {:?} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]);
    }
    s
}

pub fn write_ply(path: &Path, coords: &[[f64; 3]], colors: &[[u8; 3]]) -> Result<()> {
    ensure!(coords.len() == colors.len(), "{} points but {} colors", coords.len(), colors.len());
    std::fs::write(path, format_ply(coords, colors)).with_context(|| format!("cannot write {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_counts_vertices() {
        let s = format_ply(&[[0.0, 1.0, 2.0], [0.5, 0.5, 0.5]], &[[1, 2, 3], [4, 5, 6]]);
        assert!(s.contains("element vertex 2\n"));
        assert!(s.ends_with("0.5 0.5 0.5 4 5 6\n"));
        assert_eq!(s.lines().count(), 10 + 2);
    }

    #[test]
    fn colors_are_distinct_for_neighboring_ids() {
        let c: Vec<[u8; 3]> = (0..8).map(instance_color).collect();
        for i in 0..7 {
            assert_ne!(c[i], c[i + 1]);
        }
        assert_eq!(instance_color(-1), semantic_color(0));
    }
}
