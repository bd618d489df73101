//! Frame-level success check for stored trajectories.
//!
//! Buffer files carry no scene seeds, so a stored demo is re-verified from
//! its own frames and proprio stream: the container layout is read off the
//! first frame, the release point from the last closed→open gripper
//! transition, and the released object's identity from the glyph drawn at
//! that point in the final frame.

use crate::datasets::Trajectory;
use crate::render::{self, col_of, object_pixel, row_of, IMG};
use crate::simenv::{resolve_container, Container, ContainerColor, Quadrant, BIN_HALF, Z_MAX};
use crate::taskspace::{objects, ObjectSpec, TaskSpec};

fn pixel(frame: &[u8], r: i32, c: i32) -> Option<[u8; 3]> {
    if (0..IMG as i32).contains(&r) && (0..IMG as i32).contains(&c) {
        let i = (r as usize * IMG + c as usize) * 3;
        Some([frame[i], frame[i + 1], frame[i + 2]])
    } else {
        None
    }
}

/// Container layout read from a frame in which no object sits on a bin.
pub fn decode_containers(frame: &[u8]) -> Option<[Container; 2]> {
    let with_fill = |rgb: [u8; 3]| -> Option<Quadrant> {
        let hits: Vec<Quadrant> = Quadrant::ALL
            .into_iter()
            .filter(|q| {
                let (x, y) = q.center();
                pixel(frame, row_of(y), col_of(x)) == Some(rgb)
            })
            .collect();
        (hits.len() == 1).then(|| hits[0])
    };
    Some([
        Container {
            quadrant: with_fill(render::green_bin())?,
            color: ContainerColor::Green,
        },
        Container {
            quadrant: with_fill(render::red_bin())?,
            color: ContainerColor::Red,
        },
    ])
}

fn glyph_matches(frame: &[u8], obj: &ObjectSpec, x: f32, y: f32, occluded: &[(i32, i32)]) -> bool {
    let mask = render::glyph(obj.shape_index());
    let color = obj.color_index();
    let (r0, c0) = (row_of(y) - 3, col_of(x) - 3);
    let mut seen = 0;
    for (dr, line) in mask.iter().enumerate() {
        for (dc, ch) in line.bytes().enumerate() {
            let (r, c) = (r0 + dr as i32, c0 + dc as i32);
            if occluded.contains(&(r, c)) {
                continue;
            }
            let Some(p) = pixel(frame, r, c) else {
                continue;
            };
            let expected = object_pixel(color, dr, dc);
            if (ch == b'#') != (p == expected) {
                return false;
            }
            seen += usize::from(ch == b'#');
        }
    }
    seen > 0
}

/// Reconstruct the end-effector position after step `t`.
fn position_after(tr: &Trajectory, t: usize) -> [f32; 3] {
    let upper = [1.0, 1.0, Z_MAX];
    [0, 1, 2].map(|d| (tr.proprio[t][d] + tr.actions[t][d]).clamp(0.0, upper[d]))
}

/// True iff the frames show the task's object released into the task's
/// container and left there.
pub fn verify_trajectory(tr: &Trajectory, task: &TaskSpec) -> bool {
    let len = tr.len();
    if len < 2 || tr.task_id != task.task_id {
        return false;
    }
    let closed = |t: usize| tr.grippers[t] >= 0.5;
    let Some(release) = (1..len).rev().find(|&t| !closed(t) && closed(t - 1)) else {
        return false;
    };
    if release + 1 >= len || (release..len).any(closed) {
        return false;
    }
    let Some(containers) = decode_containers(tr.frame(0)) else {
        return false;
    };
    let [x, y, _] = position_after(tr, release);
    let Some(bin) = containers.iter().position(|c| {
        let (cx, cy) = c.center();
        (x - cx).abs() <= BIN_HALF && (y - cy).abs() <= BIN_HALF
    }) else {
        return false;
    };
    if resolve_container(task.container_identifier, &containers) != Some(bin) {
        return false;
    }
    let last = len - 1;
    let (er, ec) = (row_of(tr.proprio[last][1]), col_of(tr.proprio[last][0]));
    let occluded: Vec<(i32, i32)> = render::MARKER
        .iter()
        .map(|(dr, dc)| (er + dr, ec + dc))
        .collect();
    let frame = tr.frame(last);
    let matches: Vec<&ObjectSpec> = objects()
        .iter()
        .filter(|o| glyph_matches(frame, o, x, y, &occluded))
        .collect();
    matches.len() == 1 && matches[0].satisfies(task)
}
