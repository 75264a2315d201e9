//! MultiWii Serial Protocol v1 framing.
//!
//! Frame layout: `'$' 'M' dir size cmd payload[size] checksum`, where `dir` is
//! `'<'` toward the flight controller and `'>'` from it, and the checksum is
//! the XOR of `size`, `cmd` and every payload byte.

use thiserror::Error;

pub const MSP_SET_RAW_RC: u8 = 200;
pub const RC_MIN: u16 = 1000;
pub const RC_MAX: u16 = 2000;
pub const RC_MID: u16 = 1500;

const HEADER_LEN: usize = 5;
/// Preamble, direction, size, command and checksum.
pub const FRAME_OVERHEAD: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MspError {
    #[error("channel {index} value {value} outside [1000, 2000]")]
    ChannelRange { index: usize, value: u16 },
    #[error("rc command needs 8 or 16 channels, got {0}")]
    ChannelCount(usize),
    #[error("need {0} more bytes")]
    Incomplete(usize),
    #[error("checksum mismatch: expected {expected:#04x}, got {actual:#04x}")]
    Corrupt { expected: u8, actual: u8 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("payload of {0} bytes exceeds 255")]
    PayloadTooLong(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    ToDrone,
    FromDrone,
}

impl Direction {
    fn byte(self) -> u8 {
        match self {
            Direction::ToDrone => b'<',
            Direction::FromDrone => b'>',
        }
    }

    fn from_byte(b: u8) -> Option<Direction> {
        match b {
            b'<' => Some(Direction::ToDrone),
            b'>' => Some(Direction::FromDrone),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MspFrame {
    pub direction: Direction,
    pub command: u8,
    pub payload: Vec<u8>,
}

impl MspFrame {
    pub fn encoded_len(&self) -> usize {
        FRAME_OVERHEAD + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, MspError> {
        let size = u8::try_from(self.payload.len())
            .map_err(|_| MspError::PayloadTooLong(self.payload.len()))?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&[b'$', b'M', self.direction.byte(), size, self.command]);
        out.extend_from_slice(&self.payload);
        out.push(checksum(size, self.command, &self.payload));
        Ok(out)
    }

    /// Interprets a SET_RAW_RC payload.
    pub fn rc_command(&self) -> Result<RcCommand, MspError> {
        if self.command != MSP_SET_RAW_RC {
            return Err(MspError::Protocol(format!(
                "command {} is not SET_RAW_RC",
                self.command
            )));
        }
        if self.payload.len() % 2 != 0 {
            return Err(MspError::Protocol("odd SET_RAW_RC payload length".into()));
        }
        let channels: Vec<u16> = self
            .payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        RcCommand::new(&channels)
    }
}

fn checksum(size: u8, command: u8, payload: &[u8]) -> u8 {
    payload.iter().fold(size ^ command, |acc, b| acc ^ b)
}

/// RC channel values in microseconds: roll, pitch, throttle, yaw, then aux.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RcCommand {
    channels: [u16; 16],
    len: u8,
}

impl RcCommand {
    pub const ROLL: usize = 0;
    pub const PITCH: usize = 1;
    pub const THROTTLE: usize = 2;
    pub const YAW: usize = 3;
    pub const AUX1: usize = 4;

    pub fn new(channels: &[u16]) -> Result<RcCommand, MspError> {
        if channels.len() != 8 && channels.len() != 16 {
            return Err(MspError::ChannelCount(channels.len()));
        }
        if let Some((index, &value)) = channels
            .iter()
            .enumerate()
            .find(|(_, v)| !(RC_MIN..=RC_MAX).contains(*v))
        {
            return Err(MspError::ChannelRange { index, value });
        }
        let mut buf = [RC_MIN; 16];
        buf[..channels.len()].copy_from_slice(channels);
        Ok(RcCommand { channels: buf, len: channels.len() as u8 })
    }

    /// Eight channels: the four sticks plus aux1 (arm switch) and three idle aux channels.
    pub fn sticks(roll: u16, pitch: u16, throttle: u16, yaw: u16, armed: bool) -> RcCommand {
        let clamp = |v: u16| v.clamp(RC_MIN, RC_MAX);
        let arm = if armed { RC_MAX } else { RC_MIN };
        let mut channels = [RC_MIN; 16];
        channels[..8].copy_from_slice(&[
            clamp(roll),
            clamp(pitch),
            clamp(throttle),
            clamp(yaw),
            arm,
            RC_MIN,
            RC_MIN,
            RC_MIN,
        ]);
        RcCommand { channels, len: 8 }
    }

    pub fn channels(&self) -> &[u16] {
        &self.channels[..self.len as usize]
    }

    pub fn roll(&self) -> u16 {
        self.channels[Self::ROLL]
    }

    pub fn pitch(&self) -> u16 {
        self.channels[Self::PITCH]
    }

    pub fn throttle(&self) -> u16 {
        self.channels[Self::THROTTLE]
    }

    pub fn yaw(&self) -> u16 {
        self.channels[Self::YAW]
    }

    pub fn armed(&self) -> bool {
        self.channels[Self::AUX1] >= RC_MID
    }
}

/// Encodes an RC command as an MSP_SET_RAW_RC request.
pub fn encode_set_raw_rc(cmd: &RcCommand) -> Vec<u8> {
    let payload: Vec<u8> = cmd.channels().iter().flat_map(|c| c.to_le_bytes()).collect();
    MspFrame { direction: Direction::ToDrone, command: MSP_SET_RAW_RC, payload }
        .encode()
        .expect("at most 32 payload bytes")
}

/// Validating variant taking raw channel values.
pub fn encode_set_raw_rc_channels(channels: &[u16]) -> Result<Vec<u8>, MspError> {
    RcCommand::new(channels).map(|c| encode_set_raw_rc(&c))
}

/// Parses one complete frame at the start of `bytes`, returning it together
/// with the number of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(MspFrame, usize), MspError> {
    let need = |n: usize| {
        if bytes.len() < n {
            Err(MspError::Incomplete(n - bytes.len()))
        } else {
            Ok(())
        }
    };
    need(1)?;
    if bytes[0] != b'$' {
        return Err(MspError::Protocol(format!("bad preamble byte {:#04x}", bytes[0])));
    }
    need(2)?;
    if bytes[1] != b'M' {
        return Err(MspError::Protocol(format!("unsupported protocol byte {:#04x}", bytes[1])));
    }
    need(3)?;
    let direction = Direction::from_byte(bytes[2])
        .ok_or_else(|| MspError::Protocol(format!("unknown direction {:#04x}", bytes[2])))?;
    need(HEADER_LEN)?;
    let size = bytes[3];
    let command = bytes[4];
    let total = FRAME_OVERHEAD + size as usize;
    need(total)?;
    let payload = &bytes[HEADER_LEN..HEADER_LEN + size as usize];
    let expected = checksum(size, command, payload);
    let actual = bytes[total - 1];
    if expected != actual {
        return Err(MspError::Corrupt { expected, actual });
    }
    Ok((MspFrame { direction, command, payload: payload.to_vec() }, total))
}

/// Incremental decoder tolerant of arbitrary fragmentation and line noise.
///
/// Every contiguous run of discarded bytes counts as one resync event, so the
/// counters depend only on the byte content, never on how it was chunked.
#[derive(Debug, Clone, Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
    discarding: bool,
    resync_count: u64,
    corrupt_count: u64,
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn resync_count(&self) -> u64 {
        self.resync_count
    }

    pub fn corrupt_count(&self) -> u64 {
        self.corrupt_count
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    pub fn feed(&mut self, bytes: &[u8]) -> Vec<MspFrame> {
        self.buf.extend_from_slice(bytes);
        let mut frames = Vec::new();
        let mut pos = 0;
        while pos < self.buf.len() {
            match decode_frame(&self.buf[pos..]) {
                Ok((frame, used)) => {
                    frames.push(frame);
                    pos += used;
                    self.discarding = false;
                }
                Err(MspError::Incomplete(_)) => break,
                Err(err) => {
                    if matches!(err, MspError::Corrupt { .. }) {
                        self.corrupt_count += 1;
                    }
                    if !self.discarding {
                        self.discarding = true;
                        self.resync_count += 1;
                    }
                    // Skip the offending byte and resume at the next '$'.
                    pos += 1;
                    pos += self.buf[pos..].iter().position(|&b| b == b'$').unwrap_or(self.buf.len() - pos);
                }
            }
        }
        self.buf.drain(..pos);
        frames
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Hand-computed XOR over size, command and payload.
    fn xor_oracle(bytes: &[u8]) -> u8 {
        bytes[3..bytes.len() - 1].iter().fold(0, |a, b| a ^ b)
    }

    #[test]
    fn all_mid_fixture() {
        let out = encode_set_raw_rc_channels(&[1500; 8]).unwrap();
        let mut expected = vec![0x24, 0x4D, 0x3C, 0x10, 0xC8];
        for _ in 0..8 {
            expected.extend_from_slice(&[0xDC, 0x05]);
        }
        expected.push(0xD8);
        assert_eq!(out, expected);
        assert_eq!(xor_oracle(&out), 0xD8);
    }

    #[test]
    fn all_min_fixture() {
        let out = encode_set_raw_rc_channels(&[1000; 8]).unwrap();
        for pair in out[5..21].chunks(2) {
            assert_eq!(pair, &[0xE8, 0x03]);
        }
        assert_eq!(*out.last().unwrap(), 0xD8);
    }

    #[test]
    fn mixed_fixture() {
        let out =
            encode_set_raw_rc_channels(&[1500, 1400, 1500, 1500, 1500, 1500, 1500, 1500]).unwrap();
        assert_eq!(&out[7..9], &[0x78, 0x05]);
        assert_eq!(*out.last().unwrap(), 0x7C);
        assert_eq!(xor_oracle(&out), 0x7C);
    }

    #[test]
    fn encode_rejects_bad_commands() {
        assert_eq!(
            encode_set_raw_rc_channels(&[1500, 999, 1500, 1500, 1500, 1500, 1500, 1500]),
            Err(MspError::ChannelRange { index: 1, value: 999 })
        );
        assert_eq!(encode_set_raw_rc_channels(&[1500; 4]), Err(MspError::ChannelCount(4)));
        assert_eq!(encode_set_raw_rc_channels(&[2001; 16]).unwrap_err(), MspError::ChannelRange { index: 0, value: 2001 });
        assert_eq!(encode_set_raw_rc_channels(&[2000; 16]).unwrap().len(), 38);
    }

    #[test]
    fn decode_detects_flipped_checksum() {
        let mut out = encode_set_raw_rc_channels(&[1500; 8]).unwrap();
        *out.last_mut().unwrap() ^= 0xFF;
        assert!(matches!(decode_frame(&out), Err(MspError::Corrupt { .. })));
    }

    #[test]
    fn decode_reports_incomplete_and_direction() {
        let out = encode_set_raw_rc_channels(&[1500; 8]).unwrap();
        assert_eq!(decode_frame(&out[..10]).unwrap_err(), MspError::Incomplete(12));
        assert_eq!(decode_frame(&[]).unwrap_err(), MspError::Incomplete(1));
        let mut bad = out.clone();
        bad[2] = b'!';
        assert!(matches!(decode_frame(&bad), Err(MspError::Protocol(_))));
        let mut reply = out;
        reply[2] = b'>';
        assert_eq!(decode_frame(&reply).unwrap().0.direction, Direction::FromDrone);
    }

    #[test]
    fn decode_two_concatenated_frames() {
        let a = encode_set_raw_rc_channels(&[1200; 8]).unwrap();
        let b = encode_set_raw_rc_channels(&[1800; 16]).unwrap();
        let mut both = a.clone();
        both.extend_from_slice(&b);
        let (first, used) = decode_frame(&both).unwrap();
        assert_eq!(used, a.len());
        assert_eq!(first.rc_command().unwrap().channels(), &[1200; 8]);
        let (second, used2) = decode_frame(&both[used..]).unwrap();
        assert_eq!(used2, b.len());
        assert_eq!(second.rc_command().unwrap().channels(), &[1800; 16]);
    }

    #[test]
    fn stream_byte_at_a_time() {
        let out = encode_set_raw_rc_channels(&[1300; 8]).unwrap();
        let mut dec = StreamDecoder::new();
        let mut frames = Vec::new();
        for b in &out {
            frames.extend(dec.feed(std::slice::from_ref(b)));
        }
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].rc_command().unwrap().channels(), &[1300; 8]);
    }

    #[test]
    fn stream_leading_garbage() {
        let mut bytes = vec![0xFF, 0xFF];
        bytes.extend(encode_set_raw_rc_channels(&[1500; 8]).unwrap());
        let mut dec = StreamDecoder::new();
        assert_eq!(dec.feed(&bytes).len(), 1);
        assert_eq!(dec.resync_count(), 1);
        assert!(dec.feed(&[]).is_empty());
    }

    #[test]
    fn stream_recovers_after_corrupt_frame() {
        let mut bad = encode_set_raw_rc_channels(&[1500; 8]).unwrap();
        *bad.last_mut().unwrap() ^= 1;
        let good = encode_set_raw_rc_channels(&[1600; 8]).unwrap();
        bad.extend_from_slice(&good);
        let mut dec = StreamDecoder::new();
        let frames = dec.feed(&bad);
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].rc_command().unwrap().throttle(), 1600);
        assert_eq!(dec.corrupt_count(), 1);
        assert_eq!(dec.resync_count(), 1);
        assert_eq!(dec.buffered(), 0);
    }

    fn channels() -> impl Strategy<Value = Vec<u16>> {
        prop_oneof![
            proptest::collection::vec(RC_MIN..=RC_MAX, 8),
            proptest::collection::vec(RC_MIN..=RC_MAX, 16),
        ]
    }

    proptest! {
        #[test]
        fn roundtrip(ch in channels()) {
            let bytes = encode_set_raw_rc_channels(&ch).unwrap();
            prop_assert_eq!(bytes.len(), 6 + 2 * ch.len());
            let (frame, used) = decode_frame(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            let rc = frame.rc_command().unwrap();
            prop_assert_eq!(rc.channels(), &ch[..]);
        }

        #[test]
        fn rechunking_invariance(
            frames in proptest::collection::vec(channels(), 1..6),
            noise in proptest::collection::vec(any::<u8>().prop_filter("no preamble", |b| *b != b'$'), 0..4),
            cuts in proptest::collection::vec(0usize..200, 0..12),
        ) {
            let mut stream = noise.clone();
            for ch in &frames {
                stream.extend(encode_set_raw_rc_channels(ch).unwrap());
                stream.extend_from_slice(&noise);
            }
            let mut whole = StreamDecoder::new();
            let reference = whole.feed(&stream);
            prop_assert_eq!(reference.len(), frames.len());

            let mut cuts: Vec<usize> = cuts.into_iter().map(|c| c % (stream.len() + 1)).collect();
            cuts.sort_unstable();
            let mut chunked = StreamDecoder::new();
            let mut out = Vec::new();
            let mut start = 0;
            for c in cuts.into_iter().chain(std::iter::once(stream.len())) {
                out.extend(chunked.feed(&stream[start..c]));
                start = c;
            }
            prop_assert_eq!(out, reference);
            prop_assert_eq!(chunked.resync_count(), whole.resync_count());
        }
    }
}
