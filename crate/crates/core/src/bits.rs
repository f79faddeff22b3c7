//! MSB-first bit packing.

#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    filled: u32,
    written: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the low `width` bits of `value`, most significant first.
    pub fn write(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 32);
        if width == 0 {
            return;
        }
        debug_assert!(width == 64 || value < (1u64 << width));
        self.acc = (self.acc << width) | value;
        self.filled += width;
        self.written += width as u64;
        while self.filled >= 8 {
            self.filled -= 8;
            self.bytes.push((self.acc >> self.filled) as u8);
        }
        self.acc &= (1u64 << self.filled) - 1;
    }

    pub fn bits_written(&self) -> u64 {
        self.written
    }

    /// Flushes, zero-padding the final byte.
    pub fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.bytes.push((self.acc << (8 - self.filled)) as u8);
        }
        self.bytes
    }
}

#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    /// Reads `width` bits; `None` once the input is exhausted.
    pub fn read(&mut self, width: u32) -> Option<u64> {
        debug_assert!(width <= 32);
        if self.pos + width as u64 > self.bytes.len() as u64 * 8 {
            return None;
        }
        let mut out = 0u64;
        for _ in 0..width {
            let byte = self.bytes[(self.pos / 8) as usize];
            let bit = (byte >> (7 - (self.pos % 8))) & 1;
            out = (out << 1) | bit as u64;
            self.pos += 1;
        }
        Some(out)
    }

    pub fn position(&self) -> u64 {
        self.pos
    }
}
