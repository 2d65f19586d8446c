//! Duplex byte streams a session runs over.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{channel, Receiver, Sender};

/// A duplex byte stream that can be split into independently owned halves.
pub trait Transport: Send + 'static {
    type Reader: Read + Send + 'static;
    type Writer: Write + Send + 'static;

    fn split(self) -> io::Result<(Self::Reader, Self::Writer)>;
}

impl Transport for TcpStream {
    type Reader = TcpStream;
    type Writer = TcpStream;

    fn split(self) -> io::Result<(TcpStream, TcpStream)> {
        self.set_nodelay(true)?;
        let reader = self.try_clone()?;
        Ok((reader, self))
    }
}

/// One end of an in-memory duplex pipe.
pub struct MemEnd {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// A connected pair of in-memory ends.
pub fn mem_duplex() -> (MemEnd, MemEnd) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (MemEnd { tx: a_tx, rx: a_rx }, MemEnd { tx: b_tx, rx: b_rx })
}

pub struct MemReader {
    rx: Receiver<Vec<u8>>,
    chunk: Vec<u8>,
    pos: usize,
}

impl Read for MemReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        while self.pos >= self.chunk.len() {
            match self.rx.recv() {
                Ok(chunk) => {
                    self.chunk = chunk;
                    self.pos = 0;
                }
                Err(_) => return Ok(0),
            }
        }
        let n = buf.len().min(self.chunk.len() - self.pos);
        buf[..n].copy_from_slice(&self.chunk[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

pub struct MemWriter {
    tx: Sender<Vec<u8>>,
}

impl Write for MemWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        self.tx
            .send(buf.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer closed"))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Transport for MemEnd {
    type Reader = MemReader;
    type Writer = MemWriter;

    fn split(self) -> io::Result<(MemReader, MemWriter)> {
        Ok((MemReader { rx: self.rx, chunk: Vec::new(), pos: 0 }, MemWriter { tx: self.tx }))
    }
}
