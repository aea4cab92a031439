use super::world::{Shape, WorldState};
use crate::alignment::{IMAGE_CHANNELS, IMAGE_SIZE};
use crate::autograd::Tensor;

const PIXEL: f32 = 2.0 / IMAGE_SIZE as f32;
const DISC_COLORS: [[f32; 3]; 4] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.90, 0.85, 0.10],
];
const SQUARE_COLORS: [[f32; 3]; 4] = [
    [0.60, 0.20, 0.80],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.95, 0.45, 0.70],
];
const GRIPPER_COLOR: [f32; 3] = [0.95, 0.95, 0.95];
const HAND_COLOR: [f32; 3] = [0.96, 0.76, 0.60];
/// Half-width of the square window that contains any effector sprite.
pub const EFFECTOR_EXTENT: f32 = 0.2;

/// How the end effector is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sprite {
    Gripper,
    Hand,
}

struct Canvas {
    data: Vec<f32>,
}

impl Canvas {
    fn new(background: f32) -> Self {
        Self {
            data: vec![background.clamp(0.0, 1.0); IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE],
        }
    }

    /// Blends `color` with opacity `alpha·coverage`, where coverage comes
    /// from the signed distance `sdf(x, y)` (negative inside).
    fn fill(&mut self, color: [f32; 3], alpha: f32, sdf: impl Fn(f32, f32) -> f32) {
        let n = IMAGE_SIZE * IMAGE_SIZE;
        for py in 0..IMAGE_SIZE {
            let y = 1.0 - (py as f32 + 0.5) * PIXEL;
            for px in 0..IMAGE_SIZE {
                let x = (px as f32 + 0.5) * PIXEL - 1.0;
                let cov = (0.5 - sdf(x, y) / PIXEL).clamp(0.0, 1.0) * alpha;
                if cov > 0.0 {
                    let i = py * IMAGE_SIZE + px;
                    for (c, &col) in color.iter().enumerate() {
                        let v = &mut self.data[c * n + i];
                        *v += (col - *v) * cov;
                    }
                }
            }
        }
    }
}

fn circle(cx: f32, cy: f32, r: f32) -> impl Fn(f32, f32) -> f32 {
    move |x, y| (x - cx).hypot(y - cy) - r
}

fn rect(cx: f32, cy: f32, hw: f32, hh: f32) -> impl Fn(f32, f32) -> f32 {
    move |x, y| {
        let dx = (x - cx).abs() - hw;
        let dy = (y - cy).abs() - hh;
        dx.max(0.0).hypot(dy.max(0.0)) + dx.max(dy).min(0.0)
    }
}

/// Rasterizes the state with analytic anti-aliasing. Values are quantized
/// to multiples of 1/255 so they survive 8-bit storage exactly.
pub fn render(state: &WorldState, sprite: Sprite) -> Tensor {
    let mut cv = Canvas::new(state.background);
    let g = state.goal;
    cv.fill([1.0, 1.0, 1.0], 0.35, circle(g.x, g.y, g.radius));
    let mut order: Vec<&_> = state.objects.iter().filter(|o| !o.held).collect();
    order.extend(state.objects.iter().filter(|o| o.held));
    for o in order {
        match o.shape {
            Shape::Disc => cv.fill(DISC_COLORS[o.color % 4], 1.0, circle(o.x, o.y, o.radius)),
            Shape::Square => {
                let h = o.radius * 0.9;
                cv.fill(SQUARE_COLORS[o.color % 4], 1.0, rect(o.x, o.y, h, h))
            }
        }
    }
    let (gx, gy, open) = (state.gripper.x, state.gripper.y, state.gripper.open);
    match sprite {
        Sprite::Gripper => {
            let spread = 0.05 + 0.06 * open;
            cv.fill(GRIPPER_COLOR, 1.0, rect(gx - spread, gy, 0.025, 0.08));
            cv.fill(GRIPPER_COLOR, 1.0, rect(gx + spread, gy, 0.025, 0.08));
            cv.fill(
                GRIPPER_COLOR,
                1.0,
                rect(gx, gy + 0.09, spread + 0.025, 0.025),
            );
        }
        Sprite::Hand => {
            cv.fill(HAND_COLOR, 1.0, circle(gx, gy + 0.03, 0.08));
            let thumb = 0.04 + 0.05 * open;
            cv.fill(HAND_COLOR, 1.0, circle(gx + thumb + 0.04, gy - 0.04, 0.035));
        }
    }
    let data = cv
        .data
        .iter()
        .map(|&v| quantize(v) as f32 / 255.0)
        .collect();
    Tensor::new(&[IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("fixed image shape")
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Whether pixel `(px, py)` lies inside the effector window around `(gx, gy)`.
pub fn in_effector_window(px: usize, py: usize, gx: f32, gy: f32) -> bool {
    let x = (px as f32 + 0.5) * PIXEL - 1.0;
    let y = 1.0 - (py as f32 + 0.5) * PIXEL;
    (x - gx).abs() <= EFFECTOR_EXTENT && (y - gy).abs() <= EFFECTOR_EXTENT
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::world::{Difficulty, TaskSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(seed: u64, d: Difficulty) -> WorldState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WorldState::sample(&TaskSpec::new(0, d).unwrap(), &mut rng)
    }

    #[test]
    fn deterministic_and_in_range() {
        for seed in 0..5 {
            let s = state(seed, Difficulty::Hard);
            let a = render(&s, Sprite::Gripper);
            assert_eq!(a, render(&s.clone(), Sprite::Gripper));
            assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn moving_a_disc_changes_pixels() {
        let s = state(1, Difficulty::Easy);
        let mut moved = s.clone();
        moved.objects[0].x += 3.0 * PIXEL;
        assert_ne!(render(&s, Sprite::Gripper), render(&moved, Sprite::Gripper));
    }

    #[test]
    fn sprites_differ_only_near_effector() {
        for seed in 0..10 {
            let s = state(seed, Difficulty::Hard);
            let (a, b) = (render(&s, Sprite::Gripper), render(&s, Sprite::Hand));
            let n = IMAGE_SIZE * IMAGE_SIZE;
            let mut differs = false;
            for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
                if x != y {
                    differs = true;
                    let p = i % n;
                    assert!(in_effector_window(
                        p % IMAGE_SIZE,
                        p / IMAGE_SIZE,
                        s.gripper.x,
                        s.gripper.y
                    ));
                }
            }
            assert!(differs);
        }
    }
}
