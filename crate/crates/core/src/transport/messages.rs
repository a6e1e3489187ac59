//! `GetRows` messages and their framed wire form.
//!
//! Fields follow the protobuf schema
//!
//! ```text
//! message TReqGetRows {
//!     optional int64 count = 1;
//!     optional int64 reducer_index = 2;
//!     optional int64 committed_row_index = 3;
//!     optional string mapper_id = 4;
//! }
//! message TRspGetRows {
//!     optional int64 row_count = 1;
//!     optional int64 last_shuffle_row_index = 2;
//! }
//! ```
//!
//! and are encoded exactly as protobuf would (tag varint, then a varint for
//! `int64` or a length-delimited string). A frame is
//!
//! ```text
//! u32 frame_len        length of everything after this field
//! u8  kind             0 = request, 1 = response, 2 = error
//! u32 fields_len
//! fields_len bytes     protobuf-encoded fields
//! { u32 len, bytes }*  attachments up to the end of the frame
//! ```
//!
//! Error frames carry `code = 1` (varint) and `message = 2` (string).

use crate::row::{ByteReader, RowError};
use crate::Guid;

/// `committed_row_index` value meaning "nothing committed yet".
pub const NOTHING_COMMITTED: i64 = -1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GetRowsRequest {
    pub count: i64,
    pub reducer_index: i64,
    pub committed_row_index: i64,
    pub mapper_id: Guid,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GetRowsResponse {
    pub row_count: i64,
    pub last_shuffle_row_index: Option<i64>,
    /// Rows in the canonical rowset encoding; empty when `row_count == 0`.
    pub attachment: Vec<u8>,
}

/// Error response produced by the serving mapper.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GetRowsError {
    #[error("request addressed to mapper {requested}, this is {actual}")]
    StaleMapperId { requested: Guid, actual: Guid },
    #[error("reducer index {0} out of range")]
    BadReducerIndex(i64),
    #[error("{0}")]
    Other(String),
}

impl GetRowsError {
    pub fn code(&self) -> u64 {
        match self {
            GetRowsError::StaleMapperId { .. } => 1,
            GetRowsError::BadReducerIndex(_) => 2,
            GetRowsError::Other(_) => 3,
        }
    }
}

/// Failure of a `GetRows` call as seen by the caller.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RpcError {
    #[error("call timed out")]
    Timeout,
    #[error("endpoint unreachable")]
    Unreachable,
    #[error("remote error {code}: {message}")]
    Remote { code: u64, message: String },
    #[error("malformed frame: {0}")]
    Malformed(String),
}

impl From<GetRowsError> for RpcError {
    fn from(e: GetRowsError) -> Self {
        RpcError::Remote { code: e.code(), message: e.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameKind {
    Request = 0,
    Response = 1,
    Error = 2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Request(GetRowsRequest),
    Response(GetRowsResponse),
    Error { code: u64, message: String },
}

const WIRE_VARINT: u64 = 0;
const WIRE_LEN: u64 = 2;

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

fn put_int64(out: &mut Vec<u8>, field: u64, v: i64) {
    put_varint(out, (field << 3) | WIRE_VARINT);
    put_varint(out, v as u64);
}

fn put_bytes(out: &mut Vec<u8>, field: u64, v: &[u8]) {
    put_varint(out, (field << 3) | WIRE_LEN);
    put_varint(out, v.len() as u64);
    out.extend_from_slice(v);
}

fn get_varint(r: &mut ByteReader<'_>) -> Result<u64, RowError> {
    let mut v = 0u64;
    for shift in (0..70).step_by(7) {
        let b = r.u8()?;
        if shift == 63 && b > 1 {
            return Err(RowError::MalformedEncoding("varint overflow".into()));
        }
        v |= ((b & 0x7f) as u64) << shift;
        if b & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(RowError::MalformedEncoding("varint too long".into()))
}

enum FieldValue<'a> {
    Varint(u64),
    Bytes(&'a [u8]),
}

fn read_fields(buf: &[u8]) -> Result<Vec<(u64, FieldValue<'_>)>, RowError> {
    let mut r = ByteReader::new(buf);
    let mut fields = Vec::new();
    while r.remaining() > 0 {
        let tag = get_varint(&mut r)?;
        let value = match tag & 7 {
            WIRE_VARINT => FieldValue::Varint(get_varint(&mut r)?),
            WIRE_LEN => {
                let len = get_varint(&mut r)? as usize;
                FieldValue::Bytes(r.take(len)?)
            }
            w => return Err(RowError::MalformedEncoding(format!("unsupported wire type {w}"))),
        };
        fields.push((tag >> 3, value));
    }
    Ok(fields)
}

impl GetRowsRequest {
    pub fn encode_fields(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_int64(&mut out, 1, self.count);
        put_int64(&mut out, 2, self.reducer_index);
        put_int64(&mut out, 3, self.committed_row_index);
        put_bytes(&mut out, 4, self.mapper_id.to_string().as_bytes());
        out
    }

    pub fn decode_fields(buf: &[u8]) -> Result<Self, RpcError> {
        let mut req = GetRowsRequest {
            count: 0,
            reducer_index: 0,
            committed_row_index: NOTHING_COMMITTED,
            mapper_id: Guid::default(),
        };
        for (field, value) in read_fields(buf).map_err(malformed)? {
            match (field, value) {
                (1, FieldValue::Varint(v)) => req.count = v as i64,
                (2, FieldValue::Varint(v)) => req.reducer_index = v as i64,
                (3, FieldValue::Varint(v)) => req.committed_row_index = v as i64,
                (4, FieldValue::Bytes(b)) => {
                    let s = std::str::from_utf8(b).map_err(|e| RpcError::Malformed(e.to_string()))?;
                    req.mapper_id = s.parse().map_err(|e: crate::guid::ParseGuidError| RpcError::Malformed(e.to_string()))?;
                }
                _ => {}
            }
        }
        Ok(req)
    }
}

impl GetRowsResponse {
    pub fn encode_fields(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_int64(&mut out, 1, self.row_count);
        if let Some(last) = self.last_shuffle_row_index {
            put_int64(&mut out, 2, last);
        }
        out
    }

    pub fn decode_fields(buf: &[u8], attachment: Vec<u8>) -> Result<Self, RpcError> {
        let mut rsp = GetRowsResponse { attachment, ..Default::default() };
        for (field, value) in read_fields(buf).map_err(malformed)? {
            match (field, value) {
                (1, FieldValue::Varint(v)) => rsp.row_count = v as i64,
                (2, FieldValue::Varint(v)) => rsp.last_shuffle_row_index = Some(v as i64),
                _ => {}
            }
        }
        Ok(rsp)
    }
}

fn malformed(e: RowError) -> RpcError {
    RpcError::Malformed(e.to_string())
}

impl Frame {
    pub fn kind(&self) -> FrameKind {
        match self {
            Frame::Request(_) => FrameKind::Request,
            Frame::Response(_) => FrameKind::Response,
            Frame::Error { .. } => FrameKind::Error,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let (fields, attachments): (Vec<u8>, Vec<&[u8]>) = match self {
            Frame::Request(req) => (req.encode_fields(), Vec::new()),
            Frame::Response(rsp) => {
                let att = if rsp.attachment.is_empty() { Vec::new() } else { vec![rsp.attachment.as_slice()] };
                (rsp.encode_fields(), att)
            }
            Frame::Error { code, message } => {
                let mut out = Vec::new();
                put_varint(&mut out, (1 << 3) | WIRE_VARINT);
                put_varint(&mut out, *code);
                put_bytes(&mut out, 2, message.as_bytes());
                (out, Vec::new())
            }
        };
        let body_len = 1 + 4 + fields.len() + attachments.iter().map(|a| 4 + a.len()).sum::<usize>();
        let mut out = Vec::with_capacity(4 + body_len);
        out.extend_from_slice(&(body_len as u32).to_le_bytes());
        out.push(self.kind() as u8);
        out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
        out.extend_from_slice(&fields);
        for a in attachments {
            out.extend_from_slice(&(a.len() as u32).to_le_bytes());
            out.extend_from_slice(a);
        }
        out
    }

    /// Decodes the frame body (everything after the `u32 frame_len`).
    pub fn decode_body(body: &[u8]) -> Result<Frame, RpcError> {
        let mut r = ByteReader::new(body);
        let kind = r.u8().map_err(malformed)?;
        let fields_len = r.u32().map_err(malformed)? as usize;
        let fields = r.take(fields_len).map_err(malformed)?;
        let mut attachments = Vec::new();
        while r.remaining() > 0 {
            let len = r.u32().map_err(malformed)? as usize;
            attachments.push(r.take(len).map_err(malformed)?.to_vec());
        }
        match kind {
            0 => {
                if !attachments.is_empty() {
                    return Err(RpcError::Malformed("request with attachments".into()));
                }
                Ok(Frame::Request(GetRowsRequest::decode_fields(fields)?))
            }
            1 => {
                if attachments.len() > 1 {
                    return Err(RpcError::Malformed("more than one attachment".into()));
                }
                let attachment = attachments.pop().unwrap_or_default();
                Ok(Frame::Response(GetRowsResponse::decode_fields(fields, attachment)?))
            }
            2 => {
                let (mut code, mut message) = (0, String::new());
                for (field, value) in read_fields(fields).map_err(malformed)? {
                    match (field, value) {
                        (1, FieldValue::Varint(v)) => code = v,
                        (2, FieldValue::Bytes(b)) => message = String::from_utf8_lossy(b).into_owned(),
                        _ => {}
                    }
                }
                Ok(Frame::Error { code, message })
            }
            k => Err(RpcError::Malformed(format!("unknown frame kind {k}"))),
        }
    }

    /// Decodes one complete frame including its length prefix.
    pub fn decode(buf: &[u8]) -> Result<Frame, RpcError> {
        let mut r = ByteReader::new(buf);
        let len = r.u32().map_err(malformed)? as usize;
        let body = r.take(len).map_err(malformed)?;
        if r.remaining() != 0 {
            return Err(RpcError::Malformed("bytes after frame".into()));
        }
        Frame::decode_body(body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn request_fields_match_protobuf_bytes() {
        let req = GetRowsRequest {
            count: 150,
            reducer_index: 1,
            committed_row_index: -1,
            mapper_id: Guid(0x0102_0304_0506_0708_090a_0b0c_0d0e_0f10),
        };
        let bytes = req.encode_fields();
        // field 1 varint 150 -> 08 96 01
        assert_eq!(&bytes[..3], &[0x08, 0x96, 0x01]);
        // field 2 varint 1 -> 10 01
        assert_eq!(&bytes[3..5], &[0x10, 0x01]);
        // field 3 int64 -1 -> 18 + ten-byte varint
        assert_eq!(bytes[5], 0x18);
        assert_eq!(&bytes[6..16], &[0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0x01]);
        // field 4 string -> 22 len ...
        assert_eq!(bytes[16], 0x22);
        assert_eq!(bytes[17] as usize, bytes.len() - 18);
        assert_eq!(GetRowsRequest::decode_fields(&bytes).unwrap(), req);
    }

    #[test]
    fn response_frame_layout() {
        let rsp = GetRowsResponse { row_count: 2, last_shuffle_row_index: Some(8), attachment: vec![9, 9, 9] };
        let frame = Frame::Response(rsp.clone()).encode();
        #[rustfmt::skip]
        assert_eq!(frame, vec![
            16, 0, 0, 0,        // frame length
            1,                  // response
            4, 0, 0, 0,         // fields length
            0x08, 2, 0x10, 8,   // row_count = 2, last_shuffle_row_index = 8
            3, 0, 0, 0, 9, 9, 9 // attachment
        ]);
        assert_eq!(Frame::decode(&frame).unwrap(), Frame::Response(rsp));
    }

    #[test]
    fn empty_response_omits_last_index_and_attachment() {
        let rsp = GetRowsResponse::default();
        let frame = Frame::Response(rsp.clone()).encode();
        assert_eq!(frame.len(), 4 + 1 + 4 + 2);
        assert_eq!(Frame::decode(&frame).unwrap(), Frame::Response(rsp));
    }

    #[test]
    fn error_frame_round_trip_and_garbage() {
        let f = Frame::Error { code: 1, message: "stale".into() };
        assert_eq!(Frame::decode(&f.encode()).unwrap(), f);
        assert!(Frame::decode(&[1, 0, 0, 0, 7]).is_err());
        assert!(Frame::decode(&[9, 0, 0, 0, 1]).is_err());
    }

    #[test]
    fn unknown_fields_are_skipped() {
        let mut fields = GetRowsResponse { row_count: 3, last_shuffle_row_index: None, attachment: vec![] }.encode_fields();
        put_int64(&mut fields, 9, 77);
        put_bytes(&mut fields, 10, b"ignored");
        let rsp = GetRowsResponse::decode_fields(&fields, vec![]).unwrap();
        assert_eq!(rsp.row_count, 3);
    }

    proptest! {
        #[test]
        fn request_frames_round_trip(count in any::<i64>(), r in any::<i64>(), c in any::<i64>(), id in any::<u128>()) {
            let f = Frame::Request(GetRowsRequest { count, reducer_index: r, committed_row_index: c, mapper_id: Guid(id) });
            prop_assert_eq!(Frame::decode(&f.encode()).unwrap(), f);
        }

        #[test]
        fn response_frames_round_trip(n in any::<i64>(), last in proptest::option::of(any::<i64>()), att in proptest::collection::vec(any::<u8>(), 1..64)) {
            let f = Frame::Response(GetRowsResponse { row_count: n, last_shuffle_row_index: last, attachment: att });
            prop_assert_eq!(Frame::decode(&f.encode()).unwrap(), f);
        }
    }
}
