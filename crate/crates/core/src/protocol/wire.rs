//! Length-prefixed binary frames exchanged between a client and its servers.
//!
//! Frame layout: 4-byte big-endian length, version byte, kind byte, payload.
//! The length counts the version and kind bytes plus the payload. Strings are
//! a 2-byte length plus UTF-8, byte strings a 4-byte length plus data, and
//! all integers and floats are big-endian.

use std::fmt;
use std::io::{self, Read};

use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader};
use crate::error::{Error, Result};
use crate::model::{DeviceKind, TaskInstanceId};
use crate::profiler::DeviceStatus;
use crate::tasklib::TaskStateBlob;

pub const PROTOCOL_VERSION: u8 = 1;
pub const MAX_FRAME_BYTES: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    StealReq,
    StealResp,
    TaskTransfer,
    DataPull,
    DataPush,
    ResultReturn,
    Abandon,
    Hello,
    Status,
}

impl MessageKind {
    pub const ALL: [MessageKind; 9] = [
        MessageKind::StealReq,
        MessageKind::StealResp,
        MessageKind::TaskTransfer,
        MessageKind::DataPull,
        MessageKind::DataPush,
        MessageKind::ResultReturn,
        MessageKind::Abandon,
        MessageKind::Hello,
        MessageKind::Status,
    ];

    pub fn code(self) -> u8 {
        match self {
            MessageKind::StealReq => 1,
            MessageKind::StealResp => 2,
            MessageKind::TaskTransfer => 3,
            MessageKind::DataPull => 4,
            MessageKind::DataPush => 5,
            MessageKind::ResultReturn => 6,
            MessageKind::Abandon => 7,
            MessageKind::Hello => 8,
            MessageKind::Status => 9,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        MessageKind::ALL
            .into_iter()
            .find(|k| k.code() == code)
            .ok_or_else(|| Error::Protocol(format!("unknown message kind {code}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::StealReq => "STEAL_REQ",
            MessageKind::StealResp => "STEAL_RESP",
            MessageKind::TaskTransfer => "TASK_TRANSFER",
            MessageKind::DataPull => "DATA_PULL",
            MessageKind::DataPush => "DATA_PUSH",
            MessageKind::ResultReturn => "RESULT_RETURN",
            MessageKind::Abandon => "ABANDON",
            MessageKind::Hello => "HELLO",
            MessageKind::Status => "STATUS",
        }
    }

    /// Kinds that carry task state or task data, as opposed to control
    /// traffic.
    pub fn carries_task(self) -> bool {
        matches!(
            self,
            MessageKind::TaskTransfer | MessageKind::DataPush | MessageKind::ResultReturn
        )
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    StealReq {
        capacity: u32,
    },
    StealResp {
        tasks: Vec<TaskInstanceId>,
        /// No further work will ever be offered to this server.
        drained: bool,
    },
    TaskTransfer {
        instance: TaskInstanceId,
        est_local_s: f64,
        work_units: u64,
        blob: TaskStateBlob,
    },
    DataPull {
        instance: TaskInstanceId,
    },
    DataPush {
        instance: TaskInstanceId,
        data: Vec<u8>,
    },
    ResultReturn {
        instance: TaskInstanceId,
        blob: TaskStateBlob,
    },
    Abandon {
        tasks: Vec<TaskInstanceId>,
    },
    Hello {
        device_id: String,
        kind: DeviceKind,
        cpu_score: f64,
    },
    Status(DeviceStatus),
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::StealReq { .. } => MessageKind::StealReq,
            Message::StealResp { .. } => MessageKind::StealResp,
            Message::TaskTransfer { .. } => MessageKind::TaskTransfer,
            Message::DataPull { .. } => MessageKind::DataPull,
            Message::DataPush { .. } => MessageKind::DataPush,
            Message::ResultReturn { .. } => MessageKind::ResultReturn,
            Message::Abandon { .. } => MessageKind::Abandon,
            Message::Hello { .. } => MessageKind::Hello,
            Message::Status(_) => MessageKind::Status,
        }
    }

    /// The task this message concerns, if it concerns exactly one.
    pub fn instance(&self) -> Option<&TaskInstanceId> {
        match self {
            Message::TaskTransfer { instance, .. }
            | Message::DataPull { instance }
            | Message::DataPush { instance, .. }
            | Message::ResultReturn { instance, .. } => Some(instance),
            _ => None,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        self.encode_payload(&mut payload)?;
        let len = payload.len() + 2;
        if len > MAX_FRAME_BYTES {
            return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit")));
        }
        let mut frame = Vec::with_capacity(len + 4);
        codec::put_u32(&mut frame, len as u32);
        codec::put_u8(&mut frame, PROTOCOL_VERSION);
        codec::put_u8(&mut frame, self.kind().code());
        frame.extend_from_slice(&payload);
        Ok(frame)
    }

    fn encode_payload(&self, buf: &mut Vec<u8>) -> Result<()> {
        match self {
            Message::StealReq { capacity } => codec::put_u32(buf, *capacity),
            Message::StealResp { tasks, drained } => {
                codec::put_u8(buf, u8::from(*drained));
                put_ids(buf, tasks)?;
            }
            Message::TaskTransfer {
                instance,
                est_local_s,
                work_units,
                blob,
            } => {
                put_id(buf, instance)?;
                codec::put_f64(buf, *est_local_s);
                codec::put_u64(buf, *work_units);
                blob.encode_into(buf)?;
            }
            Message::DataPull { instance } => put_id(buf, instance)?,
            Message::DataPush { instance, data } => {
                put_id(buf, instance)?;
                codec::put_bytes(buf, data)?;
            }
            Message::ResultReturn { instance, blob } => {
                put_id(buf, instance)?;
                blob.encode_into(buf)?;
            }
            Message::Abandon { tasks } => put_ids(buf, tasks)?,
            Message::Hello {
                device_id,
                kind,
                cpu_score,
            } => {
                codec::put_str(buf, device_id)?;
                codec::put_u8(buf, kind.as_u8());
                codec::put_f64(buf, *cpu_score);
            }
            Message::Status(s) => {
                codec::put_str(buf, &s.device_id)?;
                codec::put_f64(buf, s.battery_level);
                codec::put_u8(buf, u8::from(s.charging));
                codec::put_f64(buf, s.cpu_load);
                codec::put_u8(buf, u8::from(s.link_up));
                codec::put_f64(buf, s.measured_throughput_bps);
                codec::put_f64(buf, s.timestamp_s);
            }
        }
        Ok(())
    }

    /// Decodes one complete frame. Trailing bytes are an error.
    pub fn decode(frame: &[u8]) -> Result<Message> {
        let mut r = Reader::new(frame);
        let len = r.u32()? as usize;
        if len < 2 || len > MAX_FRAME_BYTES {
            return Err(Error::Protocol(format!("bad frame length {len}")));
        }
        if r.remaining() != len {
            return Err(Error::Protocol(format!(
                "frame length {len} but {} bytes follow",
                r.remaining()
            )));
        }
        Self::decode_body(r.take(len)?)
    }

    /// Decodes version, kind and payload (everything after the length).
    pub fn decode_body(body: &[u8]) -> Result<Message> {
        let mut r = Reader::new(body);
        let version = r.u8()?;
        if version != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!("unsupported protocol version {version}")));
        }
        let kind = MessageKind::from_code(r.u8()?)?;
        let msg = match kind {
            MessageKind::StealReq => Message::StealReq { capacity: r.u32()? },
            MessageKind::StealResp => {
                let drained = read_bool(&mut r)?;
                Message::StealResp {
                    drained,
                    tasks: read_ids(&mut r)?,
                }
            }
            MessageKind::TaskTransfer => Message::TaskTransfer {
                instance: read_id(&mut r)?,
                est_local_s: r.f64()?,
                work_units: r.u64()?,
                blob: TaskStateBlob::read_from(&mut r)?,
            },
            MessageKind::DataPull => Message::DataPull {
                instance: read_id(&mut r)?,
            },
            MessageKind::DataPush => Message::DataPush {
                instance: read_id(&mut r)?,
                data: r.bytes()?,
            },
            MessageKind::ResultReturn => Message::ResultReturn {
                instance: read_id(&mut r)?,
                blob: TaskStateBlob::read_from(&mut r)?,
            },
            MessageKind::Abandon => Message::Abandon {
                tasks: read_ids(&mut r)?,
            },
            MessageKind::Hello => {
                let device_id = r.str()?;
                let code = r.u8()?;
                let kind = DeviceKind::from_u8(code)
                    .ok_or_else(|| Error::Protocol(format!("unknown device kind {code}")))?;
                Message::Hello {
                    device_id,
                    kind,
                    cpu_score: r.f64()?,
                }
            }
            MessageKind::Status => Message::Status(DeviceStatus {
                device_id: r.str()?,
                battery_level: r.f64()?,
                charging: read_bool(&mut r)?,
                cpu_load: r.f64()?,
                link_up: read_bool(&mut r)?,
                measured_throughput_bps: r.f64()?,
                timestamp_s: r.f64()?,
            }),
        };
        r.finish()?;
        Ok(msg)
    }
}

fn put_id(buf: &mut Vec<u8>, id: &TaskInstanceId) -> Result<()> {
    codec::put_str(buf, &id.class_id.to_string())?;
    codec::put_u64(buf, id.sequence);
    Ok(())
}

fn put_ids(buf: &mut Vec<u8>, ids: &[TaskInstanceId]) -> Result<()> {
    let n = u32::try_from(ids.len()).map_err(|_| Error::Protocol("too many ids".into()))?;
    codec::put_u32(buf, n);
    for id in ids {
        put_id(buf, id)?;
    }
    Ok(())
}

fn read_id(r: &mut Reader<'_>) -> Result<TaskInstanceId> {
    let class = r
        .str()?
        .parse()
        .map_err(|e| Error::Protocol(format!("bad class id: {e}")))?;
    Ok(TaskInstanceId::new(class, r.u64()?))
}

fn read_ids(r: &mut Reader<'_>) -> Result<Vec<TaskInstanceId>> {
    let n = r.u32()? as usize;
    // each id takes at least 10 bytes, which bounds the allocation
    if n > r.remaining() / 10 {
        return Err(Error::Protocol(format!("id count {n} exceeds frame")));
    }
    (0..n).map(|_| read_id(r)).collect()
}

fn read_bool(r: &mut Reader<'_>) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::Protocol(format!("bad boolean byte {v}"))),
    }
}

/// Reads one frame from a byte stream. Returns `Ok(None)` on a clean end of
/// stream between frames.
pub fn read_frame<R: Read>(src: &mut R) -> Result<Option<Message>> {
    let mut len = [0u8; 4];
    match src.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len < 2 || len > MAX_FRAME_BYTES {
        return Err(Error::Protocol(format!("bad frame length {len}")));
    }
    let mut body = vec![0u8; len];
    src.read_exact(&mut body)?;
    Message::decode_body(&body).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasklib::ResultStatus;
    use proptest::prelude::*;

    fn id(n: u64) -> TaskInstanceId {
        TaskInstanceId::new("demo/FindRoute".parse().unwrap(), n)
    }

    #[test]
    fn steal_req_bytes() {
        let f = Message::StealReq { capacity: 3 }.encode().unwrap();
        assert_eq!(f, vec![0, 0, 0, 6, 1, 1, 0, 0, 0, 3]);
    }

    #[test]
    fn rejects_bad_frames() {
        let mut f = Message::StealReq { capacity: 3 }.encode().unwrap();
        f[5] = 42;
        assert!(matches!(Message::decode(&f), Err(Error::Protocol(_))));
        let mut f = Message::StealReq { capacity: 3 }.encode().unwrap();
        f[4] = 2;
        assert!(Message::decode(&f).is_err());
        let f = Message::StealReq { capacity: 3 }.encode().unwrap();
        assert!(Message::decode(&f[..f.len() - 1]).is_err());
        let mut long = f.clone();
        long.push(0);
        assert!(Message::decode(&long).is_err());
    }

    #[test]
    fn stream_reader() {
        let a = Message::DataPull { instance: id(1) };
        let b = Message::Abandon { tasks: vec![id(2), id(3)] };
        let mut bytes = a.encode().unwrap();
        bytes.extend(b.encode().unwrap());
        let mut cur = io::Cursor::new(bytes);
        assert_eq!(read_frame(&mut cur).unwrap(), Some(a));
        assert_eq!(read_frame(&mut cur).unwrap(), Some(b));
        assert_eq!(read_frame(&mut cur).unwrap(), None);
    }

    fn arb_id() -> impl Strategy<Value = TaskInstanceId> {
        ("[a-z]{1,8}", "[A-Za-z]{1,8}", any::<u64>())
            .prop_map(|(ns, name, seq)| TaskInstanceId::new(crate::model::TaskClassId::new(ns, name).unwrap(), seq))
    }

    fn arb_blob() -> impl Strategy<Value = TaskStateBlob> {
        (0u8..3, proptest::collection::vec(any::<u8>(), 0..64)).prop_map(|(s, data)| TaskStateBlob {
            status: ResultStatus::from_u8(s).unwrap(),
            data,
        })
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        let ids = || proptest::collection::vec(arb_id(), 0..4);
        prop_oneof![
            any::<u32>().prop_map(|capacity| Message::StealReq { capacity }),
            (ids(), any::<bool>()).prop_map(|(tasks, drained)| Message::StealResp { tasks, drained }),
            (arb_id(), 0.0f64..1e6, any::<u64>(), arb_blob()).prop_map(|(instance, est_local_s, work_units, blob)| {
                Message::TaskTransfer { instance, est_local_s, work_units, blob }
            }),
            arb_id().prop_map(|instance| Message::DataPull { instance }),
            (arb_id(), proptest::collection::vec(any::<u8>(), 0..64))
                .prop_map(|(instance, data)| Message::DataPush { instance, data }),
            (arb_id(), arb_blob()).prop_map(|(instance, blob)| Message::ResultReturn { instance, blob }),
            ids().prop_map(|tasks| Message::Abandon { tasks }),
            ("[a-z0-9-]{1,12}", 0u8..3, 0.01f64..100.0).prop_map(|(device_id, k, cpu_score)| Message::Hello {
                device_id,
                kind: DeviceKind::from_u8(k).unwrap(),
                cpu_score,
            }),
            ("[a-z]{1,8}", 0.0f64..1.0, any::<bool>(), 0.0f64..1.0, any::<bool>(), 0.0f64..1e9, 0.0f64..1e6)
                .prop_map(|(device_id, battery_level, charging, cpu_load, link_up, thr, ts)| {
                    Message::Status(DeviceStatus {
                        device_id,
                        battery_level,
                        charging,
                        cpu_load,
                        link_up,
                        measured_throughput_bps: thr,
                        timestamp_s: ts,
                    })
                }),
        ]
    }

    proptest! {
        #[test]
        fn round_trip(msg in arb_message()) {
            let frame = msg.encode().unwrap();
            let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
            prop_assert_eq!(len, frame.len() - 4);
            prop_assert_eq!(frame[4], PROTOCOL_VERSION);
            prop_assert_eq!(frame[5], msg.kind().code());
            prop_assert_eq!(Message::decode(&frame).unwrap(), msg);
        }

        #[test]
        fn truncation_is_an_error(msg in arb_message(), cut in any::<prop::sample::Index>()) {
            let frame = msg.encode().unwrap();
            let n = cut.index(frame.len());
            prop_assert!(Message::decode(&frame[..n]).is_err());
        }
    }
}
