//! Viewer protocol messages.
//!
//! Binary frames carry a 16-byte little-endian header: the magic `DUTR`,
//! the request id, the PNG length and a reserved zero word.

use std::collections::BTreeMap;

use dut_core::scene::LookAt;
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"DUTR";
pub const HEADER_LEN: usize = 16;
/// Largest accepted image side, in pixels.
pub const MAX_IMAGE_SIDE: u32 = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    View(ViewRequest),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRequest {
    pub frame: u32,
    pub position: [f64; 3],
    pub target: [f64; 3],
    pub up: [f64; 3],
    pub fov_deg: f64,
    pub width: u32,
    pub height: u32,
    /// Echoed in the reply header. Defaults to a per-connection counter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<u32>,
}

impl ViewRequest {
    pub fn from_look_at(frame: u32, v: &LookAt) -> Self {
        Self {
            frame,
            position: v.position,
            target: v.target,
            up: v.up,
            fov_deg: v.fov_deg,
            width: v.width as u32,
            height: v.height as u32,
            request_id: None,
        }
    }

    pub fn look_at(&self) -> Result<LookAt, String> {
        for (name, side) in [("width", self.width), ("height", self.height)] {
            if side == 0 || side > MAX_IMAGE_SIDE {
                return Err(format!("{name} {side} outside 1..={MAX_IMAGE_SIDE}"));
            }
        }
        let finite = self.position.iter().chain(&self.target).chain(&self.up).all(|v| v.is_finite());
        if !finite || !self.fov_deg.is_finite() {
            return Err("camera parameters must be finite".into());
        }
        Ok(LookAt {
            position: self.position,
            target: self.target,
            up: self.up,
            fov_deg: self.fov_deg,
            width: self.width as usize,
            height: self.height as usize,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Error {
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request_id: Option<u32>,
    },
    Stats {
        request_id: u32,
        frame: u32,
        timings_ms: BTreeMap<String, f64>,
    },
}

pub fn encode_frame(request_id: u32, png: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + png.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&request_id.to_le_bytes());
    out.extend_from_slice(&(png.len() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(png);
    out
}

/// Splits a binary frame into its request id and PNG payload.
pub fn decode_frame(bytes: &[u8]) -> Result<(u32, &[u8]), String> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err("not a DUTR frame".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (id, len) = (word(4), word(8) as usize);
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != len {
        return Err(format!("header says {len} payload bytes, frame has {}", payload.len()));
    }
    Ok((id, payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let f = encode_frame(7, b"png bytes");
        assert_eq!(&f[..4], b"DUTR");
        assert_eq!(f.len(), HEADER_LEN + 9);
        assert_eq!(decode_frame(&f).unwrap(), (7, &b"png bytes"[..]));
        assert!(decode_frame(&f[..f.len() - 1]).is_err());
        assert!(decode_frame(b"XXXX000000000000").is_err());
    }

    #[test]
    fn view_message_parses() {
        let text = r#"{"type":"view","frame":1,"position":[0,0,2],"target":[0,0,0],"up":[0,1,0],"fov_deg":40,"width":64,"height":48}"#;
        let ClientMessage::View(v) = serde_json::from_str(text).unwrap();
        assert_eq!((v.frame, v.width, v.height, v.request_id), (1, 64, 48, None));
        assert!(v.look_at().unwrap().camera().is_ok());
        let bad = ViewRequest { width: 0, ..v.clone() };
        assert!(bad.look_at().is_err());
        assert!(serde_json::from_str::<ClientMessage>(r#"{"type":"orbit"}"#).is_err());
    }

    #[test]
    fn server_messages_are_tagged() {
        let e = serde_json::to_value(ServerMessage::Error {
            message: "boom".into(),
            request_id: None,
        })
        .unwrap();
        assert_eq!(e, serde_json::json!({"type": "error", "message": "boom"}));
        let s = serde_json::to_value(ServerMessage::Stats {
            request_id: 2,
            frame: 0,
            timings_ms: BTreeMap::from([("render".to_string(), 1.5)]),
        })
        .unwrap();
        assert_eq!(s["type"], "stats");
        assert_eq!(s["timings_ms"]["render"], 1.5);
    }
}
