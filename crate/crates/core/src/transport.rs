//! Length-prefixed message framing over byte streams.
//!
//! Each message goes out as `len:u32 (little-endian) payload[len]`.

use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender};

use thiserror::Error;

pub const MAX_MESSAGE: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connection lost")]
    ConnectionLost,
    #[error("message of {0} bytes exceeds the 16 MiB limit")]
    Oversize(usize),
    #[error("stream ended inside a frame ({got} of {want} bytes)")]
    Framing { got: usize, want: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Writes one framed message.
pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> Result<(), TransportError> {
    if payload.len() > MAX_MESSAGE {
        return Err(TransportError::Oversize(payload.len()));
    }
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(got)
}

/// Reads one framed message. A clean end of stream before any header byte
/// is `ConnectionLost`; an end anywhere inside a frame is `Framing`.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Vec<u8>, TransportError> {
    let mut len = [0u8; 4];
    match read_full(r, &mut len)? {
        0 => return Err(TransportError::ConnectionLost),
        4 => {}
        got => return Err(TransportError::Framing { got, want: 4 }),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_MESSAGE {
        return Err(TransportError::Oversize(len));
    }
    let mut payload = vec![0u8; len];
    let got = read_full(r, &mut payload)?;
    if got != len {
        return Err(TransportError::Framing { got, want: len });
    }
    Ok(payload)
}

/// A bidirectional message endpoint.
pub trait Endpoint {
    fn send(&mut self, msg: &[u8]) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<Vec<u8>, TransportError>;
}

/// Framed messages over any `Read + Write` stream.
#[derive(Debug)]
pub struct Framed<S> {
    stream: S,
}

impl<S: Read + Write> Framed<S> {
    pub fn new(stream: S) -> Self {
        Framed { stream }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

impl<S: Read + Write> Endpoint for Framed<S> {
    fn send(&mut self, msg: &[u8]) -> Result<(), TransportError> {
        write_frame(&mut self.stream, msg)
    }

    fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        read_frame(&mut self.stream)
    }
}

pub fn connect_tcp(addr: impl ToSocketAddrs) -> Result<Framed<TcpStream>, TransportError> {
    Ok(Framed::new(TcpStream::connect(addr)?))
}

/// One end of an in-memory channel pair.
#[derive(Debug)]
pub struct MemEndpoint {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Two connected in-memory endpoints.
pub fn mem_pair() -> (MemEndpoint, MemEndpoint) {
    let (atx, brx) = channel();
    let (btx, arx) = channel();
    (MemEndpoint { tx: atx, rx: arx }, MemEndpoint { tx: btx, rx: brx })
}

impl Endpoint for MemEndpoint {
    fn send(&mut self, msg: &[u8]) -> Result<(), TransportError> {
        if msg.len() > MAX_MESSAGE {
            return Err(TransportError::Oversize(msg.len()));
        }
        self.tx
            .send(msg.to_vec())
            .map_err(|_| TransportError::ConnectionLost)
    }

    fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        self.rx.recv().map_err(|_| TransportError::ConnectionLost)
    }
}
