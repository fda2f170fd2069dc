//! MSB-first bit packing.

#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    /// Bits already used in the last byte (0 = byte-aligned).
    used: u32,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append the low `width` bits of `value`, most significant first.
    pub fn write(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 64);
        debug_assert!(
            width == 64 || value >> width == 0,
            "value {value} wider than {width} bits"
        );
        for bit in (0..width).rev() {
            if self.used == 0 {
                self.bytes.push(0);
            }
            if (value >> bit) & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 0x80 >> self.used;
            }
            self.used = (self.used + 1) % 8;
        }
    }

    pub fn write_bit(&mut self, bit: bool) {
        self.write(bit as u64, 1);
    }

    pub fn bit_len(&self) -> u64 {
        match self.used {
            0 => self.bytes.len() as u64 * 8,
            u => (self.bytes.len() as u64 - 1) * 8 + u as u64,
        }
    }

    pub fn finish(self) -> Vec<u8> {
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
        BitReader { bytes, pos: 0 }
    }

    /// Read `width` bits; `None` if the stream is exhausted.
    pub fn read(&mut self, width: u32) -> Option<u64> {
        if self.pos + width as u64 > self.bytes.len() as u64 * 8 {
            return None;
        }
        let mut value = 0u64;
        for _ in 0..width {
            let byte = self.bytes[(self.pos / 8) as usize];
            let bit = (byte >> (7 - (self.pos % 8))) & 1;
            value = (value << 1) | bit as u64;
            self.pos += 1;
        }
        Some(value)
    }

    pub fn read_bit(&mut self) -> Option<bool> {
        self.read(1).map(|b| b == 1)
    }

    /// Byte offset of the next unread bit.
    pub fn byte_offset(&self) -> usize {
        (self.pos / 8) as usize
    }
}
