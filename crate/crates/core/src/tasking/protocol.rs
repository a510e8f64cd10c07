//! Servable wire protocol.
//!
//! A frame is a 4-byte big-endian payload length followed by the payload.
//! The payload is a compact JSON header, one `\n`, then raw little-endian
//! tensor bytes. Exactly one request frame goes to the servable's stdin and
//! exactly one response frame comes back on stdout.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::metadata::{ElementType, IoSignature};

/// Frames above this size are refused before allocation.
pub const MAX_FRAME_BYTES: usize = 1 << 30;

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("frame i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed frame: {0}")]
    Malformed(String),
}

/// Element type, shape and raw little-endian bytes of one tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub element_type: ElementType,
    pub shape: Vec<u64>,
    pub data: Vec<u8>,
}

impl Tensor {
    pub fn new(element_type: ElementType, shape: Vec<u64>, data: Vec<u8>) -> Result<Self, FrameError> {
        let t = Tensor { element_type, shape, data };
        t.check_len()?;
        Ok(t)
    }

    pub fn from_f32(shape: Vec<u64>, values: &[f32]) -> Result<Self, FrameError> {
        Tensor::new(ElementType::Float32, shape, values.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    pub fn element_count(&self) -> u64 {
        self.shape.iter().product()
    }

    pub fn check_len(&self) -> Result<(), FrameError> {
        let expected = self
            .shape
            .iter()
            .try_fold(self.element_type.size() as u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FrameError::Malformed("shape overflows".into()))?;
        if expected != self.data.len() as u64 {
            return Err(FrameError::Malformed(format!(
                "shape {:?} of {} needs {expected} bytes, got {}",
                self.shape,
                self.element_type.name(),
                self.data.len()
            )));
        }
        Ok(())
    }

    pub fn to_f32(&self) -> Option<Vec<f32>> {
        (self.element_type == ElementType::Float32)
            .then(|| self.data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestHeader {
    pub model_id: String,
    pub input_signature: IoSignature,
    pub output_signature: IoSignature,
    pub element_type: ElementType,
    pub shape: Vec<u64>,
    pub element_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseHeader {
    pub status: ResponseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_type: Option<ElementType>,
    #[serde(default)]
    pub shape: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

pub fn encode_payload<H: Serialize>(header: &H, tensor: &[u8]) -> Vec<u8> {
    let mut payload = serde_json::to_vec(header).expect("headers serialize");
    payload.push(b'\n');
    payload.extend_from_slice(tensor);
    payload
}

pub fn write_frame<W: Write, H: Serialize>(w: &mut W, header: &H, tensor: &[u8]) -> Result<(), FrameError> {
    let payload = encode_payload(header, tensor);
    let len = u32::try_from(payload.len()).map_err(|_| FrameError::Malformed("payload exceeds 4 GiB".into()))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame and splits it into the raw header bytes and tensor bytes.
pub fn read_frame<R: Read>(r: &mut R) -> Result<(Vec<u8>, Vec<u8>), FrameError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => FrameError::Malformed("stream ended before a length prefix".into()),
        _ => FrameError::Io(e),
    })?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(FrameError::Malformed(format!("declared length {len} exceeds the frame cap")));
    }
    let mut payload = Vec::with_capacity(len);
    r.take(len as u64).read_to_end(&mut payload)?;
    if payload.len() != len {
        return Err(FrameError::Malformed(format!("declared length {len}, received {}", payload.len())));
    }
    split_payload(payload)
}

fn split_payload(mut payload: Vec<u8>) -> Result<(Vec<u8>, Vec<u8>), FrameError> {
    let nl = payload
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| FrameError::Malformed("payload has no header terminator".into()))?;
    let tensor = payload.split_off(nl + 1);
    payload.pop();
    Ok((payload, tensor))
}

pub fn read_request<R: Read>(r: &mut R) -> Result<(RequestHeader, Tensor), FrameError> {
    let (header, data) = read_frame(r)?;
    let header: RequestHeader =
        serde_json::from_slice(&header).map_err(|e| FrameError::Malformed(format!("request header: {e}")))?;
    let tensor = Tensor::new(header.element_type, header.shape.clone(), data)?;
    if tensor.element_count() != header.element_count {
        return Err(FrameError::Malformed(format!(
            "element_count {} disagrees with shape {:?}",
            header.element_count, header.shape
        )));
    }
    Ok((header, tensor))
}

pub fn write_request<W: Write>(
    w: &mut W,
    model_id: &str,
    input_signature: &IoSignature,
    output_signature: &IoSignature,
    input: &Tensor,
) -> Result<(), FrameError> {
    let header = RequestHeader {
        model_id: model_id.to_string(),
        input_signature: input_signature.clone(),
        output_signature: output_signature.clone(),
        element_type: input.element_type,
        shape: input.shape.clone(),
        element_count: input.element_count(),
    };
    write_frame(w, &header, &input.data)
}

pub fn write_ok<W: Write>(w: &mut W, output: &Tensor) -> Result<(), FrameError> {
    let header = ResponseHeader {
        status: ResponseStatus::Ok,
        element_type: Some(output.element_type),
        shape: output.shape.clone(),
        message: None,
    };
    write_frame(w, &header, &output.data)
}

pub fn write_error<W: Write>(w: &mut W, message: &str) -> Result<(), FrameError> {
    let header = ResponseHeader { status: ResponseStatus::Error, element_type: None, shape: vec![], message: Some(message.to_string()) };
    write_frame(w, &header, &[])
}

/// Parses a complete response frame held in memory.
pub fn decode_response(bytes: &[u8]) -> Result<Result<Tensor, String>, FrameError> {
    let mut cursor = bytes;
    let (header, data) = read_frame(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(FrameError::Malformed(format!("{} trailing bytes after the response frame", cursor.len())));
    }
    let header: ResponseHeader =
        serde_json::from_slice(&header).map_err(|e| FrameError::Malformed(format!("response header: {e}")))?;
    match header.status {
        ResponseStatus::Error => Ok(Err(header.message.unwrap_or_else(|| "servable reported an error".into()))),
        ResponseStatus::Ok => {
            let et = header.element_type.ok_or_else(|| FrameError::Malformed("ok response without element_type".into()))?;
            Ok(Ok(Tensor::new(et, header.shape, data)?))
        }
    }
}
