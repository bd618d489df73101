//! Top-down orthographic rasterizer for tabletop scenes.

use crate::simenv::{ContainerColor, SceneState, BIN_HALF};

pub const IMG: usize = 48;
pub const OBS_BYTES: usize = IMG * IMG * 3;

const TABLE_RGB: [u8; 3] = [40, 55, 75];
const GREEN_BIN: [u8; 3] = [30, 160, 60];
const RED_BIN: [u8; 3] = [170, 25, 35];
const EEF_OPEN: [u8; 3] = [255, 0, 255];
const EEF_CLOSED: [u8; 3] = [0, 255, 255];

// Fill colors, indexed like `taskspace::COLORS`. Index 0 is drawn as a
// black/white checkerboard.
const PALETTE: [[u8; 3]; 8] = [
    [20, 20, 20],
    [130, 80, 35],
    [40, 80, 230],
    [128, 128, 128],
    [245, 245, 245],
    [230, 40, 40],
    [250, 150, 30],
    [240, 225, 40],
];
const CHECKER_LIGHT: [u8; 3] = [235, 235, 235];

// 7×7 silhouettes, indexed like `taskspace::SHAPES`.
const GLYPHS: [[&str; 7]; 10] = [
    // vase
    [
        "..###..", "...#...", "..###..", ".#####.", ".#####.", ".#####.", "..###..",
    ],
    // chalice
    [
        "#######", ".#####.", "..###..", "...#...", "...#...", "..###..", ".#####.",
    ],
    // freeform
    [
        "##.....", "###..#.", ".#####.", "..####.", ".####..", "###.##.", ".#...##",
    ],
    // bottle
    [
        "...#...", "...#...", "..###..", "..###..", "..###..", "..###..", "..###..",
    ],
    // canoe
    [
        ".......", ".......", "#.....#", "##...##", ".#####.", "..###..", ".......",
    ],
    // cup
    [
        ".......", "#####..", "#####.#", "#####.#", "#####..", ".###...", ".......",
    ],
    // bowl
    [
        ".......", ".......", "#######", "#######", ".#####.", "..###..", ".......",
    ],
    // trapezoidal prism
    [
        ".......", "..###..", ".#####.", ".#####.", "#######", "#######", ".......",
    ],
    // cylinder
    [
        ".#####.", "#######", "#######", "#######", "#######", "#######", ".#####.",
    ],
    // round hole
    [
        ".#####.", "##...##", "#.....#", "#.....#", "#.....#", "##...##", ".#####.",
    ],
];

pub fn glyph(shape: usize) -> &'static [&'static str; 7] {
    &GLYPHS[shape]
}

/// Pixel column for workspace x in [0, 1].
pub(crate) fn col_of(x: f32) -> i32 {
    (x * IMG as f32).floor() as i32
}

/// Pixel row for workspace y in [0, 1]; the back of the table is at the top.
pub(crate) fn row_of(y: f32) -> i32 {
    ((1.0 - y) * IMG as f32).floor() as i32
}

struct Canvas<'a>(&'a mut [u8]);

impl Canvas<'_> {
    fn put(&mut self, r: i32, c: i32, rgb: [u8; 3]) {
        if (0..IMG as i32).contains(&r) && (0..IMG as i32).contains(&c) {
            let i = (r as usize * IMG + c as usize) * 3;
            self.0[i..i + 3].copy_from_slice(&rgb);
        }
    }
}

/// Color of glyph cell `(dr, dc)` for an object of the given color index.
pub(crate) fn object_pixel(color: usize, dr: usize, dc: usize) -> [u8; 3] {
    if color == 0 && (dr + dc) % 2 == 1 {
        CHECKER_LIGHT
    } else {
        PALETTE[color]
    }
}

/// Pixel offsets of the end-effector marker around its center.
pub(crate) const MARKER: [(i32, i32); 5] = [(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)];

pub(crate) fn green_bin() -> [u8; 3] {
    GREEN_BIN
}

pub(crate) fn red_bin() -> [u8; 3] {
    RED_BIN
}

fn draw_object(canvas: &mut Canvas<'_>, x: f32, y: f32, color: usize, shape: usize) {
    let (r0, c0) = (row_of(y) - 3, col_of(x) - 3);
    for (dr, line) in GLYPHS[shape].iter().enumerate() {
        for (dc, ch) in line.bytes().enumerate() {
            if ch != b'#' {
                continue;
            }
            canvas.put(r0 + dr as i32, c0 + dc as i32, object_pixel(color, dr, dc));
        }
    }
}

/// Render a scene into a 48×48×3 row-major RGB buffer.
pub fn render_into(state: &SceneState, out: &mut [u8]) {
    assert_eq!(out.len(), OBS_BYTES);
    for px in out.chunks_exact_mut(3) {
        px.copy_from_slice(&TABLE_RGB);
    }
    let mut canvas = Canvas(out);
    for bin in &state.containers {
        let (cx, cy) = bin.center();
        let fill = match bin.color {
            ContainerColor::Green => GREEN_BIN,
            ContainerColor::Red => RED_BIN,
        };
        let edge = fill.map(|v| v / 2);
        let (c_lo, c_hi) = (col_of(cx - BIN_HALF), col_of(cx + BIN_HALF) - 1);
        let (r_lo, r_hi) = (row_of(cy + BIN_HALF), row_of(cy - BIN_HALF) - 1);
        for r in r_lo..=r_hi {
            for c in c_lo..=c_hi {
                let border = r == r_lo || r == r_hi || c == c_lo || c == c_hi;
                canvas.put(r, c, if border { edge } else { fill });
            }
        }
    }
    let objects = crate::taskspace::objects();
    // Attached object last so it is drawn above everything it passes over.
    let mut order: Vec<usize> = (0..state.objects.len()).collect();
    order.sort_by_key(|&i| state.attached_object == Some(i));
    for i in order {
        let o = &state.objects[i];
        let spec = &objects[o.object_row];
        draw_object(
            &mut canvas,
            o.pos[0],
            o.pos[1],
            spec.color_index(),
            spec.shape_index(),
        );
    }
    let marker = if state.gripper_closed {
        EEF_CLOSED
    } else {
        EEF_OPEN
    };
    let (r, c) = (row_of(state.eef_pos[1]), col_of(state.eef_pos[0]));
    for (dr, dc) in MARKER {
        canvas.put(r + dr, c + dc, marker);
    }
}

pub fn render(state: &SceneState) -> Vec<u8> {
    let mut out = vec![0u8; OBS_BYTES];
    render_into(state, &mut out);
    out
}
