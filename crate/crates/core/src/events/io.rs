//! `EVT1` binary event files and the `x,y,t,p` CSV fallback.
//!
//! Binary layout, all little-endian: `"EVT1"`, u32 width, u32 height,
//! u64 count, f64 t_start, f64 t_end, then `count` packed 13-byte records
//! `{u16 x, u16 y, f64 t, i8 p}`.

use std::io::{BufRead, BufReader, Read, Write};

use super::{validate_stream, BoundsPolicy, Event, EventStream, Polarity, SensorSize, TimeWindow};
use crate::error::{Error, Result};

pub const EVENT_MAGIC: &[u8; 4] = b"EVT1";
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8 + 8;
const RECORD_LEN: usize = 2 + 2 + 8 + 1;

pub fn write_events(mut out: impl Write, stream: &EventStream) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + stream.len() * RECORD_LEN);
    buf.extend_from_slice(EVENT_MAGIC);
    buf.extend_from_slice(&stream.sensor.width.to_le_bytes());
    buf.extend_from_slice(&stream.sensor.height.to_le_bytes());
    buf.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    buf.extend_from_slice(&stream.window.start().to_le_bytes());
    buf.extend_from_slice(&stream.window.end().to_le_bytes());
    for e in stream.events() {
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.extend_from_slice(&e.t.to_le_bytes());
        buf.push(e.p.sign() as u8);
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_events(mut input: impl Read) -> Result<EventStream> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::CorruptEventFile(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != EVENT_MAGIC {
        return Err(Error::CorruptEventFile("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let sensor = SensorSize::new(u32_at(4), u32_at(8));
    let count = u64_at(12) as usize;
    let window = TimeWindow::new(f64_at(20), f64_at(28))
        .map_err(|e| Error::CorruptEventFile(format!("bad window: {e}")))?;
    let payload = bytes.len() - HEADER_LEN;
    if count.checked_mul(RECORD_LEN) != Some(payload) {
        return Err(Error::CorruptEventFile(format!(
            "header announces {count} records but payload holds {payload} bytes"
        )));
    }
    let mut events = Vec::with_capacity(count);
    for rec in bytes[HEADER_LEN..].chunks_exact(RECORD_LEN) {
        let x = u16::from_le_bytes([rec[0], rec[1]]);
        let y = u16::from_le_bytes([rec[2], rec[3]]);
        let t = f64::from_le_bytes(rec[4..12].try_into().unwrap());
        let p = Polarity::from_sign(rec[12] as i8 as i64).map_err(|e| Error::CorruptEventFile(e.to_string()))?;
        events.push(Event { x, y, t, p });
    }
    validate_stream(events, window, sensor, BoundsPolicy::Error)
        .map_err(|e| Error::CorruptEventFile(format!("invalid record: {e}")))
}

pub fn write_csv(mut out: impl Write, stream: &EventStream) -> Result<()> {
    writeln!(out, "x,y,t,p")?;
    for e in stream.events() {
        writeln!(out, "{},{},{},{}", e.x, e.y, e.t, e.p.sign())?;
    }
    Ok(())
}

/// CSV carries no header metadata, so the window and sensor come from the caller.
pub fn read_csv(input: impl Read, window: TimeWindow, sensor: SensorSize, policy: BoundsPolicy) -> Result<EventStream> {
    let mut events = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if i == 0 {
            if line != "x,y,t,p" {
                return Err(Error::CorruptEventFile(format!("unexpected CSV header {line:?}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let bad = || Error::CorruptEventFile(format!("line {}: {line:?}", i + 1));
        let mut f = line.split(',');
        let (Some(x), Some(y), Some(t), Some(p), None) = (f.next(), f.next(), f.next(), f.next(), f.next()) else {
            return Err(bad());
        };
        let x: u16 = x.trim().parse().map_err(|_| bad())?;
        let y: u16 = y.trim().parse().map_err(|_| bad())?;
        let t: f64 = t.trim().parse().map_err(|_| bad())?;
        let p: i64 = p.trim().parse().map_err(|_| bad())?;
        events.push(Event::new(x, y, t, Polarity::from_sign(p)?));
    }
    validate_stream(events, window, sensor, policy)
}
