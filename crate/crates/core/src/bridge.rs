//! Length-prefixed wire protocol for out-of-process denoisers.
//!
//! Frame layout, all integers little-endian:
//!
//! ```text
//! u32 total_len    = 4 + header_len + payload_len
//! u32 header_len
//! [u8; header_len] compact UTF-8 JSON header, tagged by "op"
//! [f32; ..]        payload
//! ```
//!
//! See `docs/bridge-protocol.md` for the message catalogue.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::poisson::{AugmentedDim, Denoiser, DenoiserMetadata};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);
/// Upper bound on `total_len` accepted by readers.
pub const MAX_FRAME_LEN: u32 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Message {
    Hello {
        protocol_version: u32,
    },
    HelloAck {
        protocol_version: u32,
        #[serde(rename = "N")]
        n: usize,
        /// `null` for the infinite-D limit.
        #[serde(rename = "D")]
        d: Option<f64>,
        supports_condition: bool,
    },
    Denoise {
        sigma: f64,
        shape: [usize; 2],
        has_cond: bool,
    },
    Denoised {
        shape: [usize; 2],
    },
    Error {
        message: String,
    },
    Shutdown,
}

impl Message {
    /// Payload element count implied by the header.
    pub fn payload_len(&self) -> usize {
        match *self {
            Message::Denoise { shape, has_cond, .. } => shape[0] * shape[1] * if has_cond { 2 } else { 1 },
            Message::Denoised { shape } => shape[0] * shape[1],
            _ => 0,
        }
    }

    fn op(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "hello",
            Message::HelloAck { .. } => "hello_ack",
            Message::Denoise { .. } => "denoise",
            Message::Denoised { .. } => "denoised",
            Message::Error { .. } => "error",
            Message::Shutdown => "shutdown",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub header: Message,
    pub payload: Vec<f32>,
}

impl Frame {
    pub fn new(header: Message) -> Self {
        Self { header, payload: Vec::new() }
    }

    pub fn with_payload(header: Message, payload: Vec<f32>) -> Self {
        Self { header, payload }
    }
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let header = serde_json::to_vec(&frame.header).expect("header serializes");
    let total = 4 + header.len() + 4 * frame.payload.len();
    let mut out = Vec::with_capacity(4 + total);
    out.extend_from_slice(&(total as u32).to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in &frame.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes the body that follows the `total_len` prefix.
fn decode_body(body: &[u8]) -> Result<Frame> {
    if body.len() < 4 {
        return Err(Error::Protocol("frame shorter than its header length field".into()));
    }
    let header_len = u32::from_le_bytes(body[..4].try_into().unwrap()) as usize;
    let rest = &body[4..];
    if header_len > rest.len() {
        return Err(Error::Protocol(format!("header length {header_len} exceeds frame body of {}", rest.len())));
    }
    let header: Message =
        serde_json::from_slice(&rest[..header_len]).map_err(|e| Error::Protocol(format!("bad header: {e}")))?;
    let payload = &rest[header_len..];
    if !payload.len().is_multiple_of(4) {
        return Err(Error::Protocol(format!("payload of {} bytes is not whole f32s", payload.len())));
    }
    let count = payload.len() / 4;
    if count != header.payload_len() {
        return Err(Error::Protocol(format!(
            "{} frame declares {} payload values, carries {count}",
            header.op(),
            header.payload_len()
        )));
    }
    let payload = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Frame { header, payload })
}

/// Decodes exactly one complete frame.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame> {
    if bytes.len() < 4 {
        return Err(Error::Protocol("missing length prefix".into()));
    }
    let total = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() - 4 != total {
        return Err(Error::Protocol(format!("length prefix says {total} bytes, {} present", bytes.len() - 4)));
    }
    decode_body(&bytes[4..])
}

fn read_body(r: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Protocol("stream ended inside a length prefix".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Protocol(format!("read failed: {e}"))),
        }
    }
    let total = u32::from_le_bytes(prefix);
    if total > MAX_FRAME_LEN {
        return Err(Error::Protocol(format!("frame of {total} bytes exceeds limit")));
    }
    let mut body = vec![0u8; total as usize];
    r.read_exact(&mut body).map_err(|e| Error::Protocol(format!("truncated frame: {e}")))?;
    Ok(Some(body))
}

/// Reads one frame; `Ok(None)` on a clean end of stream before any byte.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>> {
    read_body(r)?.map(|b| decode_body(&b)).transpose()
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<()> {
    w.write_all(&encode_frame(frame)).and_then(|_| w.flush()).map_err(|e| Error::Protocol(format!("write failed: {e}")))
}

/// Where a remote denoiser lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// Shell-style command line; the child speaks the protocol on stdio.
    Command(String),
    /// `host:port`
    Tcp(String),
}

impl Endpoint {
    /// `tcp://host:port` selects TCP, anything else is a command line.
    pub fn parse(s: &str) -> Self {
        match s.strip_prefix("tcp://") {
            Some(addr) => Endpoint::Tcp(addr.to_string()),
            None => Endpoint::Command(s.to_string()),
        }
    }
}

/// Client side of the protocol. One request in flight at a time.
pub struct RemoteDenoiser {
    frames: Receiver<Result<Option<Frame>>>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    meta: DenoiserMetadata,
    timeout: Duration,
}

impl std::fmt::Debug for RemoteDenoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteDenoiser").field("meta", &self.meta).field("timeout", &self.timeout).finish()
    }
}

fn spawn_reader(mut r: impl Read + Send + 'static) -> Receiver<Result<Option<Frame>>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || loop {
        let res = read_frame(&mut r);
        let stop = !matches!(res, Ok(Some(_)));
        if tx.send(res).is_err() || stop {
            break;
        }
    });
    rx
}

impl RemoteDenoiser {
    pub fn connect(endpoint: &Endpoint, timeout: Duration) -> Result<Self> {
        let (rx, writer, child): (_, Box<dyn Write + Send>, _) = match endpoint {
            Endpoint::Command(cmd) => {
                let argv = shlex::split(cmd)
                    .filter(|a| !a.is_empty())
                    .ok_or_else(|| Error::param(format!("cannot parse server command '{cmd}'")))?;
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| Error::io(&argv[0], e))?;
                let stdout = child.stdout.take().expect("piped stdout");
                let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
                (spawn_reader(BufReader::new(stdout)), Box::new(BufWriter::new(stdin)), Some(child))
            }
            Endpoint::Tcp(addr) => {
                let sock = addr
                    .to_socket_addrs()
                    .map_err(|e| Error::io(addr, e))?
                    .next()
                    .ok_or_else(|| Error::param(format!("no address for '{addr}'")))?;
                let stream = TcpStream::connect_timeout(&sock, timeout).map_err(|e| Error::io(addr, e))?;
                stream.set_nodelay(true).ok();
                let read_half = stream.try_clone().map_err(|e| Error::io(addr, e))?;
                (spawn_reader(BufReader::new(read_half)), Box::new(BufWriter::new(stream)), None)
            }
        };
        let placeholder = DenoiserMetadata { n: 0, d: AugmentedDim::Infinite, supports_condition: false };
        let mut client = Self { frames: rx, writer, child, meta: placeholder, timeout };
        client.meta = client.handshake()?;
        Ok(client)
    }

    fn send(&mut self, frame: &Frame) -> Result<()> {
        write_frame(&mut self.writer, frame)
    }

    fn recv(&mut self) -> Result<Frame> {
        match self.frames.recv_timeout(self.timeout) {
            Ok(Ok(Some(f))) => Ok(f),
            Ok(Ok(None)) => Err(Error::Protocol("server closed the connection".into())),
            Ok(Err(e)) => Err(e),
            Err(RecvTimeoutError::Timeout) => Err(Error::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Protocol("server connection lost".into())),
        }
    }

    fn handshake(&mut self) -> Result<DenoiserMetadata> {
        self.send(&Frame::new(Message::Hello { protocol_version: PROTOCOL_VERSION }))?;
        match self.recv()?.header {
            Message::HelloAck { protocol_version, n, d, supports_condition } => {
                if protocol_version != PROTOCOL_VERSION {
                    return Err(Error::VersionMismatch { expected: PROTOCOL_VERSION, got: protocol_version });
                }
                let d = AugmentedDim::from_option(d);
                d.validate()?;
                Ok(DenoiserMetadata { n, d, supports_condition })
            }
            Message::Error { message } => Err(Error::Remote(message)),
            other => Err(Error::Protocol(format!("expected hello_ack, got {}", other.op()))),
        }
    }

    /// Asks the server to exit and waits for a child process to finish.
    pub fn shutdown(mut self) -> Result<()> {
        self.close()
    }

    fn close(&mut self) -> Result<()> {
        let sent = self.send(&Frame::new(Message::Shutdown));
        if let Some(mut child) = self.child.take() {
            // Closing stdin lets a server that missed the shutdown frame see EOF.
            self.writer = Box::new(std::io::sink());
            for _ in 0..50 {
                if child.try_wait().map_err(|e| Error::io("server process", e))?.is_some() {
                    return sent;
                }
                thread::sleep(Duration::from_millis(20));
            }
            child.kill().ok();
            child.wait().ok();
        }
        sent
    }
}

impl Drop for RemoteDenoiser {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

impl Denoiser for RemoteDenoiser {
    fn metadata(&self) -> DenoiserMetadata {
        self.meta
    }

    fn denoise(&mut self, x: &Image, sigma: f64, condition: Option<&Image>) -> Result<Image> {
        if condition.is_some() && !self.meta.supports_condition {
            return Err(Error::param("server does not accept a condition image"));
        }
        if x.len() != self.meta.n {
            return Err(Error::ShapeMismatch(format!("image has {} pixels, server expects {}", x.len(), self.meta.n)));
        }
        let shape = [x.height(), x.width()];
        let mut payload = x.values().to_vec();
        if let Some(c) = condition {
            x.require_same_grid(c, "condition")?;
            payload.extend_from_slice(c.values());
        }
        self.send(&Frame::with_payload(Message::Denoise { sigma, shape, has_cond: condition.is_some() }, payload))?;
        let reply = self.recv()?;
        match reply.header {
            Message::Denoised { shape: got } if got == shape => x.with_values(reply.payload),
            Message::Denoised { shape: got } => {
                Err(Error::Protocol(format!("reply shape {got:?} != request shape {shape:?}")))
            }
            Message::Error { message } => Err(Error::Remote(message)),
            other => Err(Error::Protocol(format!("expected denoised, got {}", other.op()))),
        }
    }
}

/// Server behaviour knobs, mostly for protocol tests.
#[derive(Debug, Clone, Copy)]
pub struct ServeOptions {
    /// Version announced in `hello_ack`.
    pub protocol_version: u32,
    /// Pixel size given to decoded request images.
    pub pixel_size: f64,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self { protocol_version: PROTOCOL_VERSION, pixel_size: 1.0 }
    }
}

fn error_frame(message: impl Into<String>) -> Frame {
    Frame::new(Message::Error { message: message.into() })
}

/// Answers requests until `shutdown` or end of stream. Malformed frames get
/// an error reply and the loop continues while framing is intact.
pub fn serve(r: &mut impl Read, w: &mut impl Write, den: &mut dyn Denoiser, opts: ServeOptions) -> Result<()> {
    loop {
        let Some(body) = read_body(r)? else { return Ok(()) };
        let frame = match decode_body(&body) {
            Ok(f) => f,
            Err(e) => {
                write_frame(w, &error_frame(e.to_string()))?;
                continue;
            }
        };
        let reply = match frame.header {
            Message::Hello { protocol_version } if protocol_version != opts.protocol_version => {
                error_frame(format!("unsupported protocol version {protocol_version}"))
            }
            Message::Hello { .. } => {
                let meta = den.metadata();
                Frame::new(Message::HelloAck {
                    protocol_version: opts.protocol_version,
                    n: meta.n,
                    d: meta.d.finite(),
                    supports_condition: meta.supports_condition,
                })
            }
            Message::Denoise { sigma, shape, has_cond } => {
                let n = shape[0] * shape[1];
                let mut payload = frame.payload;
                let cond = if has_cond { Some(payload.split_off(n)) } else { None };
                let result = Image::new(shape[1], shape[0], opts.pixel_size, payload).and_then(|x| {
                    let c = cond.map(|c| Image::new(shape[1], shape[0], opts.pixel_size, c)).transpose()?;
                    den.denoise(&x, sigma, c.as_ref())
                });
                match result {
                    Ok(img) => Frame::with_payload(Message::Denoised { shape }, img.into_values()),
                    Err(e) => error_frame(e.to_string()),
                }
            }
            Message::Shutdown => return Ok(()),
            other => error_frame(format!("unexpected {} frame", other.op())),
        };
        write_frame(w, &reply)?;
    }
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy)]
pub struct IdentityDenoiser {
    pub n: usize,
}

impl Denoiser for IdentityDenoiser {
    fn metadata(&self) -> DenoiserMetadata {
        DenoiserMetadata { n: self.n, d: AugmentedDim::Infinite, supports_condition: true }
    }

    fn denoise(&mut self, x: &Image, _sigma: f64, _condition: Option<&Image>) -> Result<Image> {
        Ok(x.clone())
    }
}

/// Adds one to every pixel.
#[derive(Debug, Clone, Copy)]
pub struct AddOneDenoiser {
    pub n: usize,
}

impl Denoiser for AddOneDenoiser {
    fn metadata(&self) -> DenoiserMetadata {
        DenoiserMetadata { n: self.n, d: AugmentedDim::Infinite, supports_condition: false }
    }

    fn denoise(&mut self, x: &Image, _sigma: f64, _condition: Option<&Image>) -> Result<Image> {
        x.with_values(x.values().iter().map(|v| v + 1.0).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::net::TcpListener;

    #[test]
    fn header_json_is_compact_and_tagged() {
        let f = Frame::new(Message::Hello { protocol_version: 1 });
        let bytes = encode_frame(&f);
        assert_eq!(&bytes[8..], br#"{"op":"hello","protocol_version":1}"#);
        assert_eq!(u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize, bytes.len() - 4);
        let ack = Message::HelloAck { protocol_version: 1, n: 4, d: None, supports_condition: false };
        assert_eq!(
            serde_json::to_string(&ack).unwrap(),
            r#"{"op":"hello_ack","protocol_version":1,"N":4,"D":null,"supports_condition":false}"#
        );
        assert_eq!(serde_json::to_string(&Message::Shutdown).unwrap(), r#"{"op":"shutdown"}"#);
    }

    #[test]
    fn decode_rejects_bad_frames() {
        let good = encode_frame(&Frame::with_payload(Message::Denoised { shape: [1, 2] }, vec![1.0, 2.0]));
        assert!(decode_frame(&good).is_ok());
        assert!(matches!(decode_frame(&good[..good.len() - 1]), Err(Error::Protocol(_))));
        let short = encode_frame(&Frame::with_payload(Message::Denoised { shape: [1, 3] }, vec![1.0, 2.0]));
        assert!(matches!(decode_frame(&short), Err(Error::Protocol(_))));
        let mut bogus = good.clone();
        bogus[8] = b'[';
        assert!(matches!(decode_frame(&bogus), Err(Error::Protocol(_))));
        let mut stream: &[u8] = &good[..6];
        assert!(read_frame(&mut stream).is_err());
        let mut empty: &[u8] = &[];
        assert!(read_frame(&mut empty).unwrap().is_none());
    }

    proptest! {
        #[test]
        fn frame_round_trip(h in 1usize..5, w in 1usize..5, cond: bool, sigma in 1e-3f64..100.0,
                            seed in proptest::collection::vec(any::<u32>(), 32)) {
            let n = h * w * if cond { 2 } else { 1 };
            // Arbitrary bit patterns, NaNs included.
            let payload: Vec<f32> = (0..n).map(|i| f32::from_bits(seed[i % 32])).collect();
            let f = Frame::with_payload(Message::Denoise { sigma, shape: [h, w], has_cond: cond }, payload.clone());
            let back = decode_frame(&encode_frame(&f)).unwrap();
            prop_assert_eq!(&back.header, &f.header);
            prop_assert!(back.payload.iter().zip(&payload).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    fn tcp_server(
        make: impl FnOnce() -> Box<dyn Denoiser + Send> + Send + 'static,
        opts: ServeOptions,
    ) -> (String, thread::JoinHandle<Result<()>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let handle = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut r = BufReader::new(stream.try_clone().unwrap());
            let mut w = BufWriter::new(stream);
            let mut den = make();
            serve(&mut r, &mut w, &mut *den, opts)
        });
        (addr, handle)
    }

    #[test]
    fn identity_and_add_one_over_tcp() {
        let (addr, h) = tcp_server(|| Box::new(IdentityDenoiser { n: 6 }), ServeOptions::default());
        let mut client = RemoteDenoiser::connect(&Endpoint::Tcp(addr), DEFAULT_TIMEOUT).unwrap();
        assert_eq!(client.metadata(), DenoiserMetadata { n: 6, d: AugmentedDim::Infinite, supports_condition: true });
        let x = Image::new(3, 2, 0.5, vec![0.1, -2.5, 1e-30, 7.0, f32::MIN_POSITIVE, 3.3]).unwrap();
        let out = client.denoise(&x, 0.7, Some(&x)).unwrap();
        assert!(out.values().iter().zip(x.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(out.pixel_size(), 0.5);
        assert!(matches!(client.denoise(&Image::zeros(2, 2, 1.0), 1.0, None), Err(Error::ShapeMismatch(_))));
        client.shutdown().unwrap();
        h.join().unwrap().unwrap();

        let (addr, h) = tcp_server(|| Box::new(AddOneDenoiser { n: 4 }), ServeOptions::default());
        let mut client = RemoteDenoiser::connect(&Endpoint::Tcp(addr), DEFAULT_TIMEOUT).unwrap();
        let out = client.denoise(&Image::zeros(2, 2, 1.0), 1.0, None).unwrap();
        assert!(out.values().iter().all(|&v| v == 1.0));
        let err = client.denoise(&Image::zeros(2, 2, 1.0), 1.0, Some(&Image::zeros(2, 2, 1.0))).unwrap_err();
        assert!(matches!(err, Error::Param(_)));
        drop(client);
        h.join().unwrap().unwrap();
    }

    #[test]
    fn version_mismatch_and_timeout() {
        let opts = ServeOptions { protocol_version: 2, ..Default::default() };
        let (addr, _h) = tcp_server(|| Box::new(IdentityDenoiser { n: 1 }), opts);
        let err = RemoteDenoiser::connect(&Endpoint::Tcp(addr), DEFAULT_TIMEOUT).unwrap_err();
        // A version-2 server rejects our hello with an error frame.
        assert!(matches!(err, Error::Remote(_)), "{err:?}");

        // Server that acks with version 2.
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let h = thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let _ = read_frame(&mut s).unwrap();
            let ack = Message::HelloAck { protocol_version: 2, n: 1, d: Some(128.0), supports_condition: false };
            write_frame(&mut s, &Frame::new(ack)).unwrap();
            let _ = read_frame(&mut s);
        });
        let err = RemoteDenoiser::connect(&Endpoint::Tcp(addr), DEFAULT_TIMEOUT).unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { expected: 1, got: 2 }), "{err:?}");
        h.join().unwrap();

        // Accepts, never answers.
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let h = thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            thread::sleep(Duration::from_millis(600));
            drop(s);
        });
        let err = RemoteDenoiser::connect(&Endpoint::Tcp(addr), Duration::from_millis(200)).unwrap_err();
        assert!(matches!(err, Error::Timeout(_)), "{err:?}");
        h.join().unwrap();
    }

    #[test]
    fn server_reports_errors_and_stays_alive() {
        let mut input = Vec::new();
        input.extend(encode_frame(&Frame::new(Message::Denoised { shape: [0, 0] })));
        // Well-framed garbage header.
        let junk = b"not json";
        input.extend(((4 + junk.len()) as u32).to_le_bytes());
        input.extend((junk.len() as u32).to_le_bytes());
        input.extend(junk);
        input.extend(encode_frame(&Frame::with_payload(
            Message::Denoise { sigma: 1.0, shape: [1, 2], has_cond: false },
            vec![1.0, 2.0],
        )));
        input.extend(encode_frame(&Frame::new(Message::Shutdown)));
        let mut out = Vec::new();
        serve(&mut input.as_slice(), &mut out, &mut AddOneDenoiser { n: 2 }, ServeOptions::default()).unwrap();
        let mut r = out.as_slice();
        let replies: Vec<Frame> = std::iter::from_fn(|| read_frame(&mut r).unwrap()).collect();
        assert_eq!(replies.len(), 3);
        assert!(matches!(replies[0].header, Message::Error { .. }));
        assert!(matches!(replies[1].header, Message::Error { .. }));
        assert_eq!(replies[2].payload, vec![2.0, 3.0]);
    }

    #[test]
    fn endpoint_parsing() {
        assert_eq!(Endpoint::parse("tcp://127.0.0.1:9"), Endpoint::Tcp("127.0.0.1:9".into()));
        assert_eq!(Endpoint::parse("respf bridge-serve"), Endpoint::Command("respf bridge-serve".into()));
    }
}
