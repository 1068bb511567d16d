//! On-disk formats: OBJ templates with a JSON skeleton sidecar, motion and
//! camera-rig JSON, DUTF float rasters, PNG images and point clouds.

use std::fs;
use std::io::{BufWriter, Cursor, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::ImageBuffer;
use crate::scene::{
    build_adjacency, Camera, CameraRig, Joint, LookAt, Mat3, MotionFrame, PointCloud, RigidTransform, SkinnedTemplate, TexelKind, TexelMap,
    Vec2, Vec3,
};

/// Triangle geometry as stored in an OBJ file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub uv_coords: Vec<[Vec2; 3]>,
}

fn parse_floats<const N: usize>(parts: &[&str], line: usize) -> Result<[f64; N]> {
    if parts.len() < N {
        return Err(Error::Parse(format!("line {line}: expected {N} numbers")));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| Error::Parse(format!("line {line}: bad number {p:?}")))?;
    }
    Ok(out)
}

fn parse_index(s: &str, count: usize, line: usize) -> Result<usize> {
    let i: i64 = s.parse().map_err(|_| Error::Parse(format!("line {line}: bad index {s:?}")))?;
    let resolved = if i < 0 { count as i64 + i } else { i - 1 };
    if resolved < 0 || resolved as usize >= count {
        return Err(Error::Parse(format!("line {line}: index {i} out of range ({count} entries)")));
    }
    Ok(resolved as usize)
}

/// Parses `v`, `vt` and `f v/vt` records. Polygons are fan-triangulated;
/// faces without texture indices are rejected.
pub fn parse_obj(text: &str) -> Result<ObjMesh> {
    let mut positions = Vec::new();
    let mut uvs = Vec::new();
    let mut mesh = ObjMesh::default();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let parts: Vec<&str> = raw.split_whitespace().collect();
        match parts.first().copied() {
            Some("v") => {
                let [x, y, z] = parse_floats::<3>(&parts[1..], line)?;
                positions.push(Vec3::new(x, y, z));
            }
            Some("vt") => {
                let [u, v] = parse_floats::<2>(&parts[1..], line)?;
                uvs.push(Vec2::new(u, v));
            }
            Some("f") => {
                let mut corners = Vec::new();
                for c in &parts[1..] {
                    let mut it = c.split('/');
                    let v = parse_index(it.next().unwrap_or(""), positions.len(), line)?;
                    let vt = match it.next() {
                        Some(s) if !s.is_empty() => parse_index(s, uvs.len(), line)?,
                        _ => return Err(Error::Parse(format!("line {line}: face corner {c:?} has no texture index"))),
                    };
                    corners.push((v, uvs[vt]));
                }
                if corners.len() < 3 {
                    return Err(Error::Parse(format!("line {line}: face with {} corners", corners.len())));
                }
                for k in 1..corners.len() - 1 {
                    let (a, b, c) = (corners[0], corners[k], corners[k + 1]);
                    mesh.triangles.push([a.0, b.0, c.0]);
                    mesh.uv_coords.push([a.1, b.1, c.1]);
                }
            }
            _ => {}
        }
    }
    mesh.vertices = positions;
    Ok(mesh)
}

/// Writes one `vt` per corner so seams survive a round trip.
pub fn format_obj(vertices: &[Vec3], triangles: &[[usize; 3]], uv_coords: &[[Vec2; 3]]) -> String {
    let mut s = String::new();
    for v in vertices {
        s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for corners in uv_coords {
        for uv in corners {
            s.push_str(&format!("vt {} {}\n", uv.x, uv.y));
        }
    }
    for (f, tri) in triangles.iter().enumerate() {
        s.push_str(&format!(
            "f {}/{} {}/{} {}/{}\n",
            tri[0] + 1,
            3 * f + 1,
            tri[1] + 1,
            3 * f + 2,
            tri[2] + 1,
            3 * f + 3
        ));
    }
    s
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct JointRecord {
    pub name: String,
    pub parent: Option<usize>,
    pub canonical_transform: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SkeletonFile {
    pub joints: Vec<JointRecord>,
    /// Per vertex, a list of `[joint_index, weight]` pairs.
    pub weights: Vec<Vec<(usize, f64)>>,
}

impl SkeletonFile {
    pub fn from_template(t: &SkinnedTemplate) -> Self {
        Self {
            joints: t
                .joints
                .iter()
                .map(|j| JointRecord {
                    name: j.name.clone(),
                    parent: j.parent,
                    canonical_transform: j.canonical.to_row_major().to_vec(),
                })
                .collect(),
            weights: t.skin_weights.clone(),
        }
    }

    pub fn joints(&self) -> Result<Vec<Joint>> {
        self.joints
            .iter()
            .map(|j| {
                Ok(Joint {
                    name: j.name.clone(),
                    parent: j.parent,
                    canonical: RigidTransform::from_row_major(&j.canonical_transform)?,
                })
            })
            .collect()
    }
}

/// Assembles a template from OBJ text and skeleton JSON and builds its adjacency.
pub fn template_from_parts(obj: &str, skeleton: &SkeletonFile) -> Result<SkinnedTemplate> {
    let mesh = parse_obj(obj)?;
    if skeleton.weights.len() != mesh.vertices.len() {
        return Err(Error::LengthMismatch {
            expected: mesh.vertices.len(),
            got: skeleton.weights.len(),
        });
    }
    let t = SkinnedTemplate {
        vertices: mesh.vertices,
        triangles: mesh.triangles,
        uv_coords: mesh.uv_coords,
        joints: skeleton.joints()?,
        skin_weights: skeleton.weights.clone(),
        ..Default::default()
    };
    build_adjacency(&t)
}

pub fn load_template(obj_path: &Path, skeleton_path: &Path) -> Result<SkinnedTemplate> {
    let obj = fs::read_to_string(obj_path)?;
    let skeleton: SkeletonFile = serde_json::from_str(&fs::read_to_string(skeleton_path)?)?;
    template_from_parts(&obj, &skeleton)
}

pub fn save_template(t: &SkinnedTemplate, obj_path: &Path, skeleton_path: &Path) -> Result<()> {
    fs::write(obj_path, format_obj(&t.vertices, &t.triangles, &t.uv_coords))?;
    write_json(skeleton_path, &SkeletonFile::from_template(t))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn motion_to_json(frames: &[MotionFrame]) -> Vec<Vec<Vec<f64>>> {
    frames
        .iter()
        .map(|f| f.joint_transforms.iter().map(|x| x.to_row_major().to_vec()).collect())
        .collect()
}

pub fn motion_from_json(frames: &[Vec<Vec<f64>>]) -> Result<Vec<MotionFrame>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            Ok(MotionFrame {
                frame_index: i,
                joint_transforms: f.iter().map(|m| RigidTransform::from_row_major(m)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

pub fn save_motion(path: &Path, frames: &[MotionFrame]) -> Result<()> {
    write_json(path, &motion_to_json(frames))
}

pub fn load_motion(path: &Path) -> Result<Vec<MotionFrame>> {
    let raw: Vec<Vec<Vec<f64>>> = read_json(path)?;
    motion_from_json(&raw)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CameraRecord {
    pub intrinsics: Vec<f64>,
    pub extrinsics: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RigFile {
    pub cameras: Vec<CameraRecord>,
    #[serde(default)]
    pub condition: Vec<usize>,
    #[serde(default)]
    pub held_out: Vec<usize>,
    /// Optional look-at parameters, one per camera, for cameras built that way.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub views: Vec<LookAt>,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let k = &c.intrinsics;
        Self {
            intrinsics: (0..3).flat_map(|r| (0..3).map(move |col| k[(r, col)])).collect(),
            extrinsics: c.extrinsics.to_row_major().to_vec(),
            width: c.width,
            height: c.height,
        }
    }
}

impl CameraRecord {
    pub fn to_camera(&self) -> Result<Camera> {
        if self.intrinsics.len() != 9 {
            return Err(Error::Parse(format!("intrinsics need 9 values, got {}", self.intrinsics.len())));
        }
        let cam = Camera {
            intrinsics: Mat3::from_row_slice(&self.intrinsics),
            extrinsics: RigidTransform::from_row_major(&self.extrinsics)?,
            width: self.width,
            height: self.height,
        };
        cam.validate()?;
        Ok(cam)
    }
}

impl RigFile {
    pub fn from_rig(rig: &CameraRig) -> Self {
        Self {
            cameras: rig.cameras.iter().map(CameraRecord::from).collect(),
            condition: rig.condition.clone(),
            held_out: rig.held_out.clone(),
            views: Vec::new(),
        }
    }

    /// Without explicit splits every camera is a condition view.
    pub fn to_rig(&self) -> Result<CameraRig> {
        let cameras: Vec<Camera> = self.cameras.iter().map(|c| c.to_camera()).collect::<Result<_>>()?;
        let condition = if self.condition.is_empty() && self.held_out.is_empty() {
            (0..cameras.len()).collect()
        } else {
            self.condition.clone()
        };
        for &i in condition.iter().chain(&self.held_out) {
            if i >= cameras.len() {
                return Err(Error::Parse(format!("camera index {i} out of range ({} cameras)", cameras.len())));
            }
        }
        Ok(CameraRig {
            cameras,
            condition,
            held_out: self.held_out.clone(),
        })
    }
}

pub fn save_rig(path: &Path, rig: &CameraRig) -> Result<()> {
    write_json(path, &RigFile::from_rig(rig))
}

pub fn load_rig(path: &Path) -> Result<CameraRig> {
    read_json::<RigFile>(path)?.to_rig()
}

/// A raw DUTF raster; texel maps are the square case.
#[derive(Clone, Debug, PartialEq)]
pub struct Dutf {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub kind: TexelKind,
    pub data: Vec<f32>,
}

const DUTF_MAGIC: &[u8; 4] = b"DUTF";

impl Dutf {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.data.len() * 4);
        out.extend_from_slice(DUTF_MAGIC);
        for v in [self.width as u32, self.height as u32, self.channels as u32, self.kind.tag()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != DUTF_MAGIC {
            return Err(Error::Parse("not a DUTF file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (width, height, channels) = (word(0) as usize, word(1) as usize, word(2) as usize);
        let kind = TexelKind::from_tag(word(3)).ok_or_else(|| Error::Parse(format!("unknown kind tag {}", word(3))))?;
        let n = width * height * channels;
        if bytes.len() != 20 + 4 * n {
            return Err(Error::Parse(format!(
                "DUTF payload is {} bytes, header implies {}",
                bytes.len() - 20,
                4 * n
            )));
        }
        let data = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            width,
            height,
            channels,
            kind,
            data,
        })
    }

    pub fn from_texel_map(m: &TexelMap) -> Self {
        Self {
            width: m.resolution,
            height: m.resolution,
            channels: m.channels,
            kind: m.kind,
            data: m.data.clone(),
        }
    }

    pub fn into_texel_map(self) -> Result<TexelMap> {
        if self.width != self.height {
            return Err(Error::DimensionMismatch(format!(
                "texel map must be square, got {}x{}",
                self.width, self.height
            )));
        }
        TexelMap::from_data(self.width, self.channels, self.kind, self.data)
    }
}

pub fn write_texel_map(path: &Path, m: &TexelMap) -> Result<()> {
    fs::write(path, Dutf::from_texel_map(m).encode())?;
    Ok(())
}

pub fn read_texel_map(path: &Path) -> Result<TexelMap> {
    Dutf::decode(&fs::read(path)?)?.into_texel_map()
}

pub fn write_depth(path: &Path, img: &ImageBuffer) -> Result<()> {
    let d = Dutf {
        width: img.width,
        height: img.height,
        channels: 1,
        kind: TexelKind::Depth,
        data: img.depth.clone(),
    };
    fs::write(path, d.encode())?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let d = Dutf::decode(&fs::read(path)?)?;
    if d.channels != 1 {
        return Err(Error::ChannelMismatch {
            expected: 1,
            got: d.channels,
        });
    }
    Ok((d.width, d.height, d.data))
}

/// Value an 8-bit PNG round trip produces for `v`.
pub fn quantize_u8(v: f32) -> f32 {
    to_u8(v) as f32 / 255.0
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes the color channels (1, 3 or 4) of an image as 8-bit PNG.
pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    encode_png_raw(img.width, img.height, img.channels, &img.data)
}

pub fn encode_png_raw(width: usize, height: usize, channels: usize, data: &[f32]) -> Result<Vec<u8>> {
    let color = match channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        4 => image::ExtendedColorType::Rgba8,
        c => return Err(Error::InvalidArgument(format!("cannot encode {c} channels as PNG"))),
    };
    let bytes: Vec<u8> = data.iter().map(|&v| to_u8(v)).collect();
    let mut out = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(Cursor::new(&mut out)),
        &bytes,
        width as u32,
        height as u32,
        color,
    )?;
    Ok(out)
}

pub fn write_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    fs::write(path, encode_png(img)?)?;
    Ok(())
}

pub fn write_mask_png(path: &Path, width: usize, height: usize, mask: &[f32]) -> Result<()> {
    fs::write(path, encode_png_raw(width, height, 1, mask)?)?;
    Ok(())
}

/// Decodes a PNG into an RGB image with values in [0,1]. Depth stays
/// empty and the mask is all foreground.
pub fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let rgb = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = ImageBuffer::new(w, h, 3);
    img.data = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    img.mask = vec![1.0; w * h];
    Ok(img)
}

/// Reads a grayscale mask PNG as values in [0,1].
pub fn read_mask_png(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let l = image::load_from_memory_with_format(&fs::read(path)?, image::ImageFormat::Png)?.to_luma8();
    Ok((
        l.width() as usize,
        l.height() as usize,
        l.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
    ))
}

pub fn read_png(path: &Path) -> Result<ImageBuffer> {
    decode_png(&fs::read(path)?)
}

/// Point clouds as an N×1 three-channel DUTF raster of positions.
pub fn write_point_cloud(path: &Path, pc: &PointCloud) -> Result<()> {
    let d = Dutf {
        width: pc.points.len(),
        height: 1,
        channels: 3,
        kind: TexelKind::Position,
        data: pc.points.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect(),
    };
    fs::write(path, d.encode())?;
    Ok(())
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    let d = Dutf::decode(&fs::read(path)?)?;
    if d.channels != 3 || d.height != 1 {
        return Err(Error::DimensionMismatch(format!(
            "point cloud raster must be Nx1x3, got {}x{}x{}",
            d.width, d.height, d.channels
        )));
    }
    Ok(PointCloud::new(
        d.data
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64))
            .collect(),
    ))
}
