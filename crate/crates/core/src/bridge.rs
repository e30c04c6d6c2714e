//! Wire protocol for external image scorers.
//!
//! Request: `DRBR`, u32 width, u32 height, u32 channels (3), then the image
//! as row-major f32. Response: `DRBG`, f64 loss, u8 stop flag, then an f32
//! cotangent of the same shape. All little-endian, one request in flight.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use crate::error::{Error, Result};
use crate::fit::{Score, Scorer};
use crate::image::{Image, PixelLoss};

pub const REQUEST_MAGIC: &[u8; 4] = b"DRBR";
pub const RESPONSE_MAGIC: &[u8; 4] = b"DRBG";
const CHANNELS: u32 = 3;

fn protocol(msg: impl Into<String>) -> Error {
    Error::BridgeProtocolError(msg.into())
}

/// Reads exactly `buf.len()` bytes. A clean end of stream before the first
/// byte is `BridgeClosed`; ending part-way is a protocol violation.
fn read_frame<R: Read>(r: &mut R, buf: &mut [u8], first: bool) -> Result<()> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) if got == 0 && first => return Err(Error::BridgeClosed),
            Ok(0) => return Err(protocol(format!("stream ended after {got} of {} bytes", buf.len()))),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(io_error(e)),
        }
    }
    Ok(())
}

fn io_error(e: io::Error) -> Error {
    match e.kind() {
        io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset | io::ErrorKind::UnexpectedEof => {
            Error::BridgeClosed
        }
        _ => Error::Io(e),
    }
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

fn f32_values(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

pub fn write_request<W: Write>(w: &mut W, image: &Image) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * image.data.len());
    buf.extend_from_slice(REQUEST_MAGIC);
    buf.extend_from_slice(&(image.width as u32).to_le_bytes());
    buf.extend_from_slice(&(image.height as u32).to_le_bytes());
    buf.extend_from_slice(&CHANNELS.to_le_bytes());
    buf.extend_from_slice(&f32_bytes(&image.data));
    w.write_all(&buf).and_then(|_| w.flush()).map_err(io_error)
}

/// Reads one request; `Ok(None)` when the peer has closed the stream.
pub fn read_request<R: Read>(r: &mut R) -> Result<Option<Image>> {
    let mut head = [0u8; 16];
    match read_frame(r, &mut head, true) {
        Err(Error::BridgeClosed) => return Ok(None),
        other => other?,
    }
    if &head[..4] != REQUEST_MAGIC {
        return Err(protocol("bad request magic"));
    }
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap()) as usize;
    let (w, h, c) = (word(4), word(8), word(12));
    if c != CHANNELS as usize || w == 0 || h == 0 || w.saturating_mul(h) > 1 << 26 {
        return Err(protocol(format!("unsupported image shape {w}x{h}x{c}")));
    }
    let mut body = vec![0u8; 4 * 3 * w * h];
    read_frame(r, &mut body, false)?;
    let mut img = Image::zeros(w, h);
    img.data = f32_values(&body);
    Ok(Some(img))
}

pub fn write_response<W: Write>(w: &mut W, score: &Score) -> Result<()> {
    let mut buf = Vec::with_capacity(13 + 4 * score.cotangent.data.len());
    buf.extend_from_slice(RESPONSE_MAGIC);
    buf.extend_from_slice(&score.loss.to_le_bytes());
    buf.push(u8::from(score.stop));
    buf.extend_from_slice(&f32_bytes(&score.cotangent.data));
    w.write_all(&buf).and_then(|_| w.flush()).map_err(io_error)
}

/// Reads the response to a request for a `width`×`height` image.
pub fn read_response<R: Read>(r: &mut R, width: usize, height: usize) -> Result<Score> {
    let mut head = [0u8; 13];
    read_frame(r, &mut head, true)?;
    if &head[..4] != RESPONSE_MAGIC {
        return Err(protocol("bad response magic"));
    }
    let loss = f64::from_le_bytes(head[4..12].try_into().unwrap());
    let stop = match head[12] {
        0 => false,
        1 => true,
        b => return Err(protocol(format!("stop flag {b}"))),
    };
    let mut body = vec![0u8; 4 * 3 * width * height];
    read_frame(r, &mut body, false)?;
    let mut cotangent = Image::zeros(width, height);
    cotangent.data = f32_values(&body);
    Ok(Score { loss, cotangent, stop })
}

enum Transport {
    Child {
        child: Child,
        input: Option<BufWriter<ChildStdin>>,
        output: BufReader<ChildStdout>,
    },
    Tcp(BufReader<TcpStream>),
    Stream(Box<dyn ReadWrite>),
}

/// Any bidirectional byte stream.
pub trait ReadWrite: Read + Write + Send {}
impl<T: Read + Write + Send> ReadWrite for T {}

/// Client end of a scorer connection.
pub struct Bridge {
    transport: Transport,
}

impl Bridge {
    /// Spawns `command` (split on whitespace) and talks over its stdin and
    /// stdout.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| Error::Config("empty bridge command".into()))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(program, e))?;
        let input = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let output = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            transport: Transport::Child {
                child,
                input: Some(input),
                output,
            },
        })
    }

    pub fn connect(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::io(addr, e))?;
        stream.set_nodelay(true).ok();
        Ok(Self {
            transport: Transport::Tcp(BufReader::new(stream)),
        })
    }

    /// A `host:port` endpoint connects over TCP; anything else is a command.
    pub fn open(endpoint: &str) -> Result<Self> {
        let looks_tcp = !endpoint.contains(char::is_whitespace)
            && endpoint
                .rsplit_once(':')
                .is_some_and(|(h, p)| !h.is_empty() && p.parse::<u16>().is_ok());
        if looks_tcp {
            Self::connect(endpoint)
        } else {
            Self::spawn(endpoint)
        }
    }

    pub fn from_stream<S: ReadWrite + 'static>(stream: S) -> Self {
        Self {
            transport: Transport::Stream(Box::new(stream)),
        }
    }
}

impl Scorer for Bridge {
    fn score(&mut self, image: &Image) -> Result<Score> {
        let (w, h) = (image.width, image.height);
        match &mut self.transport {
            Transport::Child { input, output, .. } => {
                write_request(input.as_mut().ok_or(Error::BridgeClosed)?, image)?;
                read_response(output, w, h)
            }
            Transport::Tcp(s) => {
                write_request(s.get_mut(), image)?;
                read_response(s, w, h)
            }
            Transport::Stream(s) => {
                write_request(s, image)?;
                read_response(s, w, h)
            }
        }
    }
}

impl Drop for Bridge {
    fn drop(&mut self) {
        if let Transport::Child { child, input, .. } = &mut self.transport {
            // closing stdin asks the scorer to exit
            drop(input.take());
            let _ = child.wait();
        }
    }
}

/// Answers requests with `scorer` until the client closes the stream.
/// Returns the number of requests served.
pub fn serve<R: Read, W: Write>(scorer: &mut dyn Scorer, input: &mut R, output: &mut W) -> Result<usize> {
    let mut served = 0;
    while let Some(img) = read_request(input)? {
        let s = scorer.score(&img)?;
        write_response(output, &s)?;
        served += 1;
    }
    Ok(served)
}

/// The reference scorer: mean squared error against a target image.
pub fn mse_score(image: &Image, target: &Image) -> Result<Score> {
    let (loss, cotangent) = image.loss(target, PixelLoss::Mse)?;
    Ok(Score {
        loss,
        cotangent,
        stop: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::MseScorer;
    use std::io::Cursor;
    use std::os::unix::net::UnixStream;

    fn image(w: usize, h: usize, k: f64) -> Image {
        let mut img = Image::zeros(w, h);
        img.data
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64 * k).sin() * 0.5 + 0.5);
        img
    }

    #[test]
    fn messages_round_trip() {
        let img = image(5, 3, 0.3);
        let mut buf = Vec::new();
        write_request(&mut buf, &img).unwrap();
        assert_eq!(&buf[..4], b"DRBR");
        assert_eq!(buf.len(), 16 + 4 * 45);
        let back = read_request(&mut Cursor::new(&buf)).unwrap().unwrap();
        assert_eq!(back, img.clone().quantized_f32());
        assert!(read_request(&mut Cursor::new(&[] as &[u8])).unwrap().is_none());

        let s = Score {
            loss: 0.125,
            cotangent: image(5, 3, 0.7),
            stop: true,
        };
        let mut buf = Vec::new();
        write_response(&mut buf, &s).unwrap();
        assert_eq!(buf.len(), 13 + 4 * 45);
        let r = read_response(&mut Cursor::new(&buf), 5, 3).unwrap();
        assert_eq!(r.loss, 0.125);
        assert!(r.stop);
        assert_eq!(r.cotangent, s.cotangent.quantized_f32());

        // wrong shape, wrong magic, early close
        assert!(matches!(
            read_response(&mut Cursor::new(&buf), 6, 3),
            Err(Error::BridgeProtocolError(_))
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_response(&mut Cursor::new(&bad), 5, 3),
            Err(Error::BridgeProtocolError(_))
        ));
        assert!(matches!(
            read_response(&mut Cursor::new(&[] as &[u8]), 5, 3),
            Err(Error::BridgeClosed)
        ));
        let mut req = Vec::new();
        write_request(&mut req, &img).unwrap();
        req[12] = 4;
        assert!(matches!(
            read_request(&mut Cursor::new(&req)),
            Err(Error::BridgeProtocolError(_))
        ));
    }

    #[test]
    fn stream_bridge_matches_in_process_scorer() {
        let target = image(8, 6, 0.11);
        let (client, server) = UnixStream::pair().unwrap();
        let t = target.clone();
        let handle = std::thread::spawn(move || {
            let mut scorer = MseScorer { target: t };
            let mut r = server.try_clone().unwrap();
            let mut w = server;
            serve(&mut scorer, &mut r, &mut w).unwrap()
        });
        let mut bridge = Bridge::from_stream(client);
        let mut local = MseScorer { target };
        for k in [0.2, 0.5, 0.9] {
            let img = image(8, 6, k);
            let a = bridge.score(&img).unwrap();
            let b = local.score(&img).unwrap();
            assert!((a.loss - b.loss).abs() < 1e-6);
            for (x, y) in a.cotangent.data.iter().zip(&b.cotangent.data) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        drop(bridge);
        assert_eq!(handle.join().unwrap(), 3);
    }

    #[test]
    fn short_reply_is_a_protocol_error() {
        let (client, mut server) = UnixStream::pair().unwrap();
        let handle = std::thread::spawn(move || {
            let img = read_request(&mut server).unwrap().unwrap();
            let s = Score {
                loss: 1.0,
                cotangent: Image::zeros(img.width / 2, img.height),
                stop: false,
            };
            write_response(&mut server, &s).unwrap();
        });
        let mut bridge = Bridge::from_stream(client);
        let e = bridge.score(&image(4, 4, 0.1));
        assert!(matches!(e, Err(Error::BridgeProtocolError(_))), "{e:?}");
        handle.join().unwrap();
    }

    #[test]
    fn endpoint_kinds() {
        assert!(matches!(Bridge::open(""), Err(Error::Config(_))));
        assert!(matches!(
            Bridge::open("/nonexistent/scorer --flag"),
            Err(Error::IoFailure { .. })
        ));
    }
}
