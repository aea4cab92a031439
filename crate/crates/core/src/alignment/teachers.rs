use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tensor;
use crate::error::{config_err, shape_err, FrappeError, Result};
use crate::nn::{ParamId, ParamStore};

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIZE: usize = 32;
/// Tokens per embedding (one per image quadrant).
pub const TEACHER_TOKENS: usize = 4;
/// Width of each teacher token.
pub const TEACHER_DIM: usize = 32;
const PATCH: usize = 8;
const PATCH_DIM: usize = IMAGE_CHANNELS * PATCH * PATCH;

/// Anything that maps an image to a `[TEACHER_TOKENS, TEACHER_DIM]` target.
pub trait Encoder {
    fn encode(&self, image: &Tensor) -> Result<Tensor>;
}

pub(crate) fn check_image(image: &Tensor) -> Result<()> {
    if image.shape() != [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(shape_err!(
            "encoder expects a [{IMAGE_CHANNELS}, {IMAGE_SIZE}, {IMAGE_SIZE}] image, got {:?}",
            image.shape()
        ));
    }
    Ok(())
}

/// 8×8 patches ordered quadrant by quadrant (four patches per quadrant),
/// each flattened channel-major and centred around zero.
pub fn quadrant_patches(image: &[f32], out: &mut Vec<f32>) {
    let s = IMAGE_SIZE;
    for qy in 0..2 {
        for qx in 0..2 {
            for py in 2 * qy..2 * qy + 2 {
                for px in 2 * qx..2 * qx + 2 {
                    for c in 0..IMAGE_CHANNELS {
                        for y in 0..PATCH {
                            let row = c * s * s + (py * PATCH + y) * s + px * PATCH;
                            out.extend(image[row..row + PATCH].iter().map(|v| v - 0.5));
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TeacherKind {
    PatchMlp,
    ConvStack,
    RandomProjection,
}

impl TeacherKind {
    pub const ALL: [TeacherKind; 3] = [
        TeacherKind::PatchMlp,
        TeacherKind::ConvStack,
        TeacherKind::RandomProjection,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            TeacherKind::PatchMlp => "patch-mlp",
            TeacherKind::ConvStack => "conv-stack",
            TeacherKind::RandomProjection => "random-projection+tanh",
        }
    }

    fn seed(self) -> u64 {
        match self {
            TeacherKind::PatchMlp => 0x7ea0_0001,
            TeacherKind::ConvStack => 0x7ea0_0002,
            TeacherKind::RandomProjection => 0x7ea0_0003,
        }
    }
}

impl fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for TeacherKind {
    type Err = FrappeError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| config_err!("unknown teacher architecture {s:?}"))
    }
}

const CONV_CHANNELS: [usize; 4] = [IMAGE_CHANNELS, 16, 32, TEACHER_DIM];

/// A frozen stand-in vision encoder with fixed weights per architecture.
/// Its parameters live in a private store that never reaches a tape.
#[derive(Debug, Clone)]
pub struct TeacherEncoder {
    kind: TeacherKind,
    store: ParamStore,
    ids: Vec<ParamId>,
}

impl TeacherEncoder {
    pub fn new(kind: TeacherKind) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(kind.seed());
        let mut store = ParamStore::new();
        let mut add = |name: &str, shape: &[usize], std: f64, store: &mut ParamStore| {
            let t = if std == 0.0 {
                Tensor::zeros(shape)
            } else {
                Tensor::randn(shape, std, &mut rng)
            };
            store
                .insert(format!("teacher.{}.{name}", kind.tag()), t)
                .expect("fresh names")
        };
        let ids = match kind {
            TeacherKind::PatchMlp => vec![
                add(
                    "fc1.w",
                    &[64, PATCH_DIM],
                    3.0 / (PATCH_DIM as f64).sqrt(),
                    &mut store,
                ),
                add("fc1.b", &[64], 0.1, &mut store),
                add("fc2.w", &[TEACHER_DIM, 64], 1.0 / 8.0, &mut store),
                add("fc2.b", &[TEACHER_DIM], 0.0, &mut store),
            ],
            TeacherKind::ConvStack => {
                let mut ids = Vec::new();
                for l in 0..3 {
                    let (cin, cout) = (CONV_CHANNELS[l], CONV_CHANNELS[l + 1]);
                    let std = (2.0 / (cin * 9) as f64).sqrt();
                    ids.push(add(
                        &format!("conv{l}.w"),
                        &[cout, cin, 3, 3],
                        std,
                        &mut store,
                    ));
                    ids.push(add(&format!("conv{l}.b"), &[cout], 0.05, &mut store));
                }
                ids
            }
            TeacherKind::RandomProjection => {
                let d = IMAGE_CHANNELS * 16 * 16;
                vec![
                    add(
                        "proj.w",
                        &[TEACHER_DIM, d],
                        4.0 / (d as f64).sqrt(),
                        &mut store,
                    ),
                    add("proj.b", &[TEACHER_DIM], 0.1, &mut store),
                ]
            }
        };
        store.set_trainable(|_| false);
        Self { kind, store, ids }
    }

    /// The three teachers in expert order.
    pub fn all() -> Vec<TeacherEncoder> {
        TeacherKind::ALL.into_iter().map(Self::new).collect()
    }

    pub fn kind(&self) -> TeacherKind {
        self.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn numel(&self) -> usize {
        self.store.numel()
    }

    pub fn hash(&self) -> String {
        self.store.hash()
    }

    fn w(&self, i: usize) -> &[f32] {
        self.store.get(self.ids[i]).data()
    }

    fn patch_mlp(&self, image: &[f32]) -> Vec<f32> {
        let mut patches = Vec::with_capacity(16 * PATCH_DIM);
        quadrant_patches(image, &mut patches);
        let mut out = vec![0.0f32; TEACHER_TOKENS * TEACHER_DIM];
        let mut hidden = [0.0f32; 64];
        for (p, patch) in patches.chunks(PATCH_DIM).enumerate() {
            let q = p / 4;
            dense(self.w(0), self.w(1), patch, &mut hidden);
            hidden.iter_mut().for_each(|h| *h = h.tanh());
            let mut o = [0.0f32; TEACHER_DIM];
            dense(self.w(2), self.w(3), &hidden, &mut o);
            for (dst, v) in out[q * TEACHER_DIM..][..TEACHER_DIM].iter_mut().zip(o) {
                *dst += v / 4.0;
            }
        }
        out
    }

    fn conv_stack(&self, image: &[f32]) -> Vec<f32> {
        let mut x: Vec<f32> = image.iter().map(|v| v - 0.5).collect();
        let mut size = IMAGE_SIZE;
        for l in 0..3 {
            let (cin, cout) = (CONV_CHANNELS[l], CONV_CHANNELS[l + 1]);
            let (y, s) = conv3x3_s2(&x, cin, size, self.w(2 * l), self.w(2 * l + 1), cout);
            x = if l < 2 {
                y.into_iter().map(|v| v.max(0.0)).collect()
            } else {
                y
            };
            size = s;
        }
        // 4×4 map → 2×2 average pool, token-major
        let mut out = vec![0.0f32; TEACHER_TOKENS * TEACHER_DIM];
        for c in 0..TEACHER_DIM {
            for yy in 0..size {
                for xx in 0..size {
                    let q = (yy / 2) * 2 + xx / 2;
                    out[q * TEACHER_DIM + c] += x[(c * size + yy) * size + xx] / 4.0;
                }
            }
        }
        out
    }

    fn random_projection(&self, image: &[f32]) -> Vec<f32> {
        let half = IMAGE_SIZE / 2;
        let mut out = Vec::with_capacity(TEACHER_TOKENS * TEACHER_DIM);
        let mut quad = Vec::with_capacity(IMAGE_CHANNELS * half * half);
        for qy in 0..2 {
            for qx in 0..2 {
                quad.clear();
                for c in 0..IMAGE_CHANNELS {
                    for y in 0..half {
                        let row =
                            c * IMAGE_SIZE * IMAGE_SIZE + (qy * half + y) * IMAGE_SIZE + qx * half;
                        quad.extend(image[row..row + half].iter().map(|v| v - 0.5));
                    }
                }
                let mut o = [0.0f32; TEACHER_DIM];
                dense(self.w(0), self.w(1), &quad, &mut o);
                out.extend(o.iter().map(|v| v.tanh()));
            }
        }
        out
    }
}

impl Encoder for TeacherEncoder {
    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        check_image(image)?;
        let out = match self.kind {
            TeacherKind::PatchMlp => self.patch_mlp(image.data()),
            TeacherKind::ConvStack => self.conv_stack(image.data()),
            TeacherKind::RandomProjection => self.random_projection(image.data()),
        };
        Tensor::new(&[TEACHER_TOKENS, TEACHER_DIM], out)
    }
}

/// `out = W·x + b` with `W` stored `[out, in]`.
fn dense(w: &[f32], b: &[f32], x: &[f32], out: &mut [f32]) {
    for (o, (row, &bias)) in out.iter_mut().zip(w.chunks(x.len()).zip(b)) {
        *o = bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>();
    }
}

/// 3×3 convolution, stride 2, zero padding 1, on a `[cin, size, size]` map.
fn conv3x3_s2(
    x: &[f32],
    cin: usize,
    size: usize,
    w: &[f32],
    b: &[f32],
    cout: usize,
) -> (Vec<f32>, usize) {
    let os = size / 2;
    let mut y = vec![0.0f32; cout * os * os];
    for co in 0..cout {
        for oy in 0..os {
            for ox in 0..os {
                let mut acc = b[co];
                for ci in 0..cin {
                    for ky in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= size as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix >= size as isize {
                                continue;
                            }
                            acc += w[((co * cin + ci) * 3 + ky) * 3 + kx]
                                * x[(ci * size + iy as usize) * size + ix as usize];
                        }
                    }
                }
                y[(co * os + oy) * os + ox] = acc;
            }
        }
    }
    (y, os)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn every_teacher_is_deterministic_and_shaped() {
        for t in TeacherEncoder::all() {
            let (a, b) = (image(1), image(2));
            let ea = t.encode(&a).unwrap();
            assert_eq!(ea.shape(), [4, 32]);
            assert_eq!(ea, t.encode(&a).unwrap());
            let eb = t.encode(&b).unwrap();
            assert!(
                ea.data()
                    .iter()
                    .zip(eb.data())
                    .any(|(x, y)| (x - y).abs() > 1e-6),
                "{}",
                t.kind()
            );
            assert!(t.params().trainable_ids().is_empty());
        }
    }

    #[test]
    fn wrong_shape_rejected() {
        let t = TeacherEncoder::new(TeacherKind::ConvStack);
        assert!(matches!(
            t.encode(&Tensor::zeros(&[3, 16, 16])),
            Err(FrappeError::Shape(_))
        ));
    }

    #[test]
    fn teachers_are_reproducible_objects() {
        for k in TeacherKind::ALL {
            assert_eq!(TeacherEncoder::new(k).hash(), TeacherEncoder::new(k).hash());
            assert_eq!(k.tag().parse::<TeacherKind>().unwrap(), k);
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        // single input channel, one output, centre tap only: picks every other pixel
        let x: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let (y, s) = conv3x3_s2(&x, 1, 4, &w, &[0.5], 1);
        assert_eq!(s, 2);
        assert_eq!(y, vec![0.5, 2.5, 8.5, 10.5]);
    }
}
