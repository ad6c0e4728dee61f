//! DVS event streams and their conversion into spike histograms.
//!
//! Histograms count events per pixel and polarity over half-open windows
//! `[t0, t0 + dt)`. Channel 0 holds ON counts, channel 1 OFF counts. Counts
//! are fed to the network as-is, without normalization.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel index of ON events inside a histogram.
pub const ON_CHANNEL: usize = 0;
/// Channel index of OFF events inside a histogram.
pub const OFF_CHANNEL: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    On,
    Off,
}

impl Polarity {
    pub fn channel(self) -> usize {
        match self {
            Polarity::On => ON_CHANNEL,
            Polarity::Off => OFF_CHANNEL,
        }
    }
}

/// A single brightness-change event. `t` is in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

/// Time-ordered events of one sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    height: usize,
    width: usize,
    events: Vec<Event>,
}

impl EventStream {
    /// Builds a stream, checking ordering and sensor bounds.
    pub fn new(height: usize, width: usize, events: Vec<Event>) -> Result<Self> {
        if let Some(i) = events.windows(2).position(|w| w[1].t < w[0].t) {
            return Err(Error::Invalid(format!("events not sorted by time at index {}", i + 1)));
        }
        if let Some(e) = events.iter().find(|e| e.x as usize >= width || e.y as usize >= height) {
            return Err(Error::Invalid(format!(
                "event at ({}, {}) outside {}x{} sensor",
                e.x, e.y, width, height
            )));
        }
        Ok(Self { height, width, events })
    }

    /// Builds a stream from unordered events, sorting them stably by time.
    pub fn from_unsorted(height: usize, width: usize, mut events: Vec<Event>) -> Result<Self> {
        events.sort_by_key(|e| e.t);
        Self::new(height, width, events)
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, events: Vec::new() }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events with `start <= t < end`.
    pub fn window(&self, start: u64, end: u64) -> &[Event] {
        let lo = self.events.partition_point(|e| e.t < start);
        let hi = self.events.partition_point(|e| e.t < end);
        &self.events[lo..hi.max(lo)]
    }
}

/// Per-polarity event counts over one time window, shape `(2, H, W)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeHistogram {
    pub counts: Vec<u32>,
    pub height: usize,
    pub width: usize,
    pub window_start: u64,
    pub window_end: u64,
}

impl SpikeHistogram {
    pub fn get(&self, channel: usize, y: usize, x: usize) -> u32 {
        self.counts[(channel * self.height + y) * self.width + x]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// `n` consecutive histograms concatenated channel-wise, shape `(2n, H, W)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputChunk {
    pub data: Vec<u32>,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Window length of each frame, in microseconds.
    pub window_length: u64,
}

impl InputChunk {
    pub fn channels(&self) -> usize {
        2 * self.n_frames
    }

    pub fn zeros(n_frames: usize, height: usize, width: usize, window_length: u64) -> Self {
        Self { data: vec![0; 2 * n_frames * height * width], n_frames, height, width, window_length }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.channels(), self.height, self.width], |i| {
            T::from_u32(self.data[i]).unwrap()
        })
    }

    /// Zero-pads or crops (anchored at the top-left corner) to `height × width`.
    pub fn pad_or_crop(&self, height: usize, width: usize) -> Self {
        let mut out = Self::zeros(self.n_frames, height, width, self.window_length);
        let (h, w) = (self.height.min(height), self.width.min(width));
        for c in 0..self.channels() {
            for y in 0..h {
                let src = (c * self.height + y) * self.width;
                let dst = (c * height + y) * width;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }
}

/// Counts the events of `stream` falling in `[t0, t0 + dt)`.
pub fn bin_events(stream: &EventStream, t0: u64, dt: u64) -> SpikeHistogram {
    assert!(dt > 0, "bin_events: window length must be positive");
    let (h, w) = (stream.height, stream.width);
    let mut counts = vec![0u32; 2 * h * w];
    let end = t0.saturating_add(dt);
    for e in stream.window(t0, end) {
        counts[(e.polarity.channel() * h + e.y as usize) * w + e.x as usize] += 1;
    }
    SpikeHistogram { counts, height: h, width: w, window_start: t0, window_end: end }
}

/// Concatenates `n` contiguous histograms starting at `t0`.
pub fn make_chunk(stream: &EventStream, t0: u64, n: usize, dt: u64) -> InputChunk {
    assert!(n >= 1, "make_chunk: need at least one frame");
    let mut data = Vec::with_capacity(2 * n * stream.height * stream.width);
    for k in 0..n as u64 {
        data.extend_from_slice(&bin_events(stream, t0 + k * dt, dt).counts);
    }
    InputChunk { data, n_frames: n, height: stream.height, width: stream.width, window_length: dt }
}

const EVT_MAGIC: &[u8; 4] = b"EVTS";
const EVT_VERSION: u16 = 1;
const EVT_HEADER: usize = 16;
const EVT_RECORD: usize = 14;

/// Serializes a stream in the `.evt` layout: 16-byte header
/// (magic, version, H, W, 6 reserved bytes) followed by 14-byte records
/// `(t: u64, x: u16, y: u16, p: u8, pad: u8)`, all little-endian.
/// The event count is implied by the file length.
pub fn encode_evt(stream: &EventStream) -> Vec<u8> {
    let mut buf = Vec::with_capacity(EVT_HEADER + EVT_RECORD * stream.len());
    buf.extend_from_slice(EVT_MAGIC);
    buf.extend_from_slice(&EVT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(stream.height as u16).to_le_bytes());
    buf.extend_from_slice(&(stream.width as u16).to_le_bytes());
    buf.extend_from_slice(&[0u8; 6]);
    for e in &stream.events {
        buf.extend_from_slice(&e.t.to_le_bytes());
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.push(matches!(e.polarity, Polarity::On) as u8);
        buf.push(0);
    }
    buf
}

pub fn decode_evt(bytes: &[u8], origin: &str) -> Result<EventStream> {
    let format = |detail: &str| Error::Format { path: origin.to_string(), detail: detail.to_string() };
    if bytes.len() < EVT_HEADER {
        return Err(Error::Truncated(origin.to_string()));
    }
    if &bytes[0..4] != EVT_MAGIC {
        return Err(format("bad magic"));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let version = u16_at(4);
    if version != EVT_VERSION {
        return Err(Error::Version { path: origin.to_string(), found: version, expected: EVT_VERSION });
    }
    let (height, width) = (u16_at(6) as usize, u16_at(8) as usize);
    let body = &bytes[EVT_HEADER..];
    if body.len() % EVT_RECORD != 0 {
        return Err(Error::Truncated(origin.to_string()));
    }
    let events = body
        .chunks_exact(EVT_RECORD)
        .map(|r| {
            let polarity = match r[12] {
                1 => Polarity::On,
                0 => Polarity::Off,
                _ => return Err(format("polarity byte must be 0 or 1")),
            };
            Ok(Event {
                t: u64::from_le_bytes(r[0..8].try_into().unwrap()),
                x: u16::from_le_bytes([r[8], r[9]]),
                y: u16::from_le_bytes([r[10], r[11]]),
                polarity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EventStream::new(height, width, events).map_err(|e| format(&e.to_string()))
}

pub fn write_evt(stream: &EventStream, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(Error::io(path))?;
    let mut out = BufWriter::new(file);
    out.write_all(&encode_evt(stream)).and_then(|_| out.flush()).map_err(Error::io(path))
}

pub fn read_evt(path: &Path) -> Result<EventStream> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_evt(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(t: u64, x: u16, y: u16, polarity: Polarity) -> Event {
        Event { t, x, y, polarity }
    }

    #[test]
    fn empty_stream_gives_zero_histogram() {
        let h = bin_events(&EventStream::empty(4, 4), 0, 1000);
        assert_eq!(h.counts, vec![0; 32]);
    }

    #[test]
    fn counts_on_events_at_one_pixel() {
        let events = (0..3).map(|t| ev(10 + t, 1, 2, Polarity::On)).collect();
        let s = EventStream::new(4, 4, events).unwrap();
        let h = bin_events(&s, 0, 100);
        assert_eq!(h.get(ON_CHANNEL, 2, 1), 3);
        assert_eq!(h.total(), 3);
    }

    #[test]
    fn window_end_is_excluded() {
        let s = EventStream::new(2, 2, vec![ev(99, 0, 0, Polarity::Off), ev(100, 0, 0, Polarity::Off)]).unwrap();
        let h = bin_events(&s, 0, 100);
        assert_eq!(h.get(OFF_CHANNEL, 0, 0), 1);
        let next = bin_events(&s, 100, 100);
        assert_eq!(next.get(OFF_CHANNEL, 0, 0), 1);
    }

    #[test]
    fn chunk_shape_and_single_frame() {
        let s = EventStream::new(3, 5, vec![ev(10, 4, 2, Polarity::On)]).unwrap();
        let c = make_chunk(&s, 0, 5, 50_000);
        assert_eq!(c.channels(), 10);
        assert_eq!(c.data.len(), 10 * 15);
        let one = make_chunk(&s, 0, 1, 50_000);
        assert_eq!(one.data, bin_events(&s, 0, 50_000).counts);
    }

    #[test]
    fn rejects_unsorted_and_out_of_bounds() {
        assert!(EventStream::new(2, 2, vec![ev(5, 0, 0, Polarity::On), ev(4, 0, 0, Polarity::On)]).is_err());
        assert!(EventStream::new(2, 2, vec![ev(5, 2, 0, Polarity::On)]).is_err());
    }

    #[test]
    fn evt_rejects_bad_magic_and_truncation() {
        let s = EventStream::new(2, 3, vec![ev(5, 1, 1, Polarity::On)]).unwrap();
        let mut bytes = encode_evt(&s);
        assert_eq!(bytes.len(), 16 + 14);
        assert!(matches!(decode_evt(&bytes[..20], "x"), Err(Error::Truncated(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_evt(&bytes, "x"), Err(Error::Format { .. })));
    }

    fn arb_stream() -> impl Strategy<Value = EventStream> {
        prop::collection::vec((0u64..1000, 0u16..6, 0u16..5, any::<bool>()), 0..200).prop_map(|raw| {
            let events = raw
                .into_iter()
                .map(|(t, x, y, on)| ev(t, x, y, if on { Polarity::On } else { Polarity::Off }))
                .collect();
            EventStream::from_unsorted(5, 6, events).unwrap()
        })
    }

    proptest! {
        #[test]
        fn histogram_total_equals_window_count(s in arb_stream(), t0 in 0u64..900, dt in 1u64..400) {
            let h = bin_events(&s, t0, dt);
            let expected = s.events().iter().filter(|e| e.t >= t0 && e.t < t0 + dt).count() as u64;
            prop_assert_eq!(h.total(), expected);
        }

        #[test]
        fn binning_is_additive(s in arb_stream(), t0 in 0u64..500, a in 1u64..300, b in 1u64..300) {
            let left = bin_events(&s, t0, a);
            let right = bin_events(&s, t0 + a, b);
            let whole = bin_events(&s, t0, a + b);
            let summed: Vec<u32> = left.counts.iter().zip(&right.counts).map(|(x, y)| x + y).collect();
            prop_assert_eq!(summed, whole.counts);
        }

        #[test]
        fn permuting_within_window_is_invisible(s in arb_stream(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut events = s.events().to_vec();
            // shuffle events sharing a 50us window while keeping the stream sorted by window
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut start = 0;
            while start < events.len() {
                let bucket = events[start].t / 50;
                let end = start + events[start..].iter().take_while(|e| e.t / 50 == bucket).count();
                events[start..end].shuffle(&mut rng);
                start = end;
            }
            let unsorted_ok = EventStream { height: s.height(), width: s.width(), events };
            prop_assert_eq!(make_chunk(&unsorted_ok, 0, 4, 50).data, make_chunk(&s, 0, 4, 50).data);
        }

        #[test]
        fn evt_round_trip(s in arb_stream()) {
            prop_assert_eq!(decode_evt(&encode_evt(&s), "mem").unwrap(), s);
        }
    }
}
