//! Out-of-process guidance providers.
//!
//! Each message is a little-endian `u32` header length, a UTF-8 JSON header,
//! then the arrays listed in the header as little-endian `f32` values, back
//! to back, in header order:
//!
//! ```text
//! [u32 len][{"op": "predict_noise", "t": 0.5, "prompt": "...", "view": 0,
//!            "arrays": [{"name": "noisy_latent", "shape": [4, 8, 8]}, ...]}][f32 ...]
//! ```
//!
//! Requests carry `op` in `info | encode | decode | encode_vjp | predict_noise`.
//! Responses carry `"ok": true` and their arrays, or `"ok": false` and `"error"`.
//! Images travel as `[H, W, 3]`, masks as `[H, W]` (0 or 1), latents as `[C, H, W]`.

use std::io::{Read, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{GuidanceProvider, Latent, NoiseRequest};
use crate::error::{Error, Result};
use crate::scene::{CropSpec, ImageFrame, MaskFrame};

/// Upper bound on a header, to reject garbage early.
const MAX_HEADER: u32 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayDesc {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ArrayDesc {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Header {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ok: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downsample_factor: Option<usize>,
    #[serde(default)]
    pub arrays: Vec<ArrayDesc>,
}

/// A decoded message: header plus arrays in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub header: Header,
    pub arrays: Vec<Vec<f64>>,
}

impl Message {
    pub fn array(&self, name: &str) -> Result<(&ArrayDesc, &[f64])> {
        self.header
            .arrays
            .iter()
            .zip(&self.arrays)
            .find(|(d, _)| d.name == name)
            .map(|(d, a)| (d, a.as_slice()))
            .ok_or_else(|| Error::Guidance(format!("message lacks array {name:?}")))
    }
}

fn wire_err(e: std::io::Error) -> Error {
    Error::Guidance(format!("provider transport: {e}"))
}

pub fn write_message(out: &mut impl Write, header: &Header, arrays: &[&[f64]]) -> Result<()> {
    if header.arrays.len() != arrays.len() {
        return Err(Error::Guidance("header and payload array counts differ".into()));
    }
    for (desc, data) in header.arrays.iter().zip(arrays) {
        if desc.len() != data.len() {
            return Err(Error::Guidance(format!("array {} has the wrong length", desc.name)));
        }
    }
    let json = serde_json::to_vec(header).map_err(|e| Error::Guidance(e.to_string()))?;
    let mut buf = Vec::with_capacity(4 + json.len() + arrays.iter().map(|a| a.len() * 4).sum::<usize>());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for data in arrays {
        for &v in data.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(wire_err)?;
    out.flush().map_err(wire_err)
}

pub fn read_message(input: &mut impl Read) -> Result<Message> {
    read_message_or_eof(input)?.ok_or_else(|| Error::Guidance("provider transport: unexpected end of stream".into()))
}

/// Like [`read_message`], but a stream that ends before a new message yields `None`.
pub fn read_message_or_eof(input: &mut impl Read) -> Result<Option<Message>> {
    let mut len = [0u8; 4];
    match input.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(wire_err(e)),
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(Error::Guidance(format!("header of {len} bytes exceeds the limit")));
    }
    let mut json = vec![0u8; len as usize];
    input.read_exact(&mut json).map_err(wire_err)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Guidance(format!("bad header: {e}")))?;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for desc in &header.arrays {
        let mut raw = vec![0u8; desc.len() * 4];
        input.read_exact(&mut raw).map_err(wire_err)?;
        arrays.push(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect(),
        );
    }
    Ok(Some(Message { header, arrays }))
}

fn image_desc(name: &str, image: &ImageFrame) -> ArrayDesc {
    ArrayDesc {
        name: name.into(),
        shape: vec![image.height, image.width, 3],
    }
}

fn latent_desc(name: &str, latent: &Latent) -> ArrayDesc {
    ArrayDesc {
        name: name.into(),
        shape: vec![latent.channels, latent.height, latent.width],
    }
}

fn to_image(desc: &ArrayDesc, data: &[f64]) -> Result<ImageFrame> {
    match desc.shape.as_slice() {
        &[h, w, 3] => ImageFrame::from_data(w, h, data.to_vec()),
        _ => Err(Error::Guidance(format!("array {} is not an image", desc.name))),
    }
}

fn to_latent(desc: &ArrayDesc, data: &[f64]) -> Result<Latent> {
    match desc.shape.as_slice() {
        &[c, h, w] => Ok(Latent {
            channels: c,
            height: h,
            width: w,
            data: data.to_vec(),
        }),
        _ => Err(Error::Guidance(format!("array {} is not a latent", desc.name))),
    }
}

fn to_mask(desc: &ArrayDesc, data: &[f64]) -> Result<MaskFrame> {
    match desc.shape.as_slice() {
        &[h, w] => Ok(MaskFrame {
            width: w,
            height: h,
            bits: data.iter().map(|&v| v > 0.5).collect(),
        }),
        _ => Err(Error::Guidance(format!("array {} is not a mask", desc.name))),
    }
}

/// Answers one request with `provider`. Provider errors become `ok: false` responses.
pub fn handle_request(provider: &dyn GuidanceProvider, request: &Message) -> Message {
    match answer(provider, request) {
        Ok(message) => message,
        Err(e) => Message {
            header: Header {
                ok: Some(false),
                error: Some(e.to_string()),
                ..Header::default()
            },
            arrays: Vec::new(),
        },
    }
}

fn ok_with(arrays: Vec<(ArrayDesc, Vec<f64>)>) -> Message {
    let (descs, data): (Vec<_>, Vec<_>) = arrays.into_iter().unzip();
    Message {
        header: Header {
            ok: Some(true),
            arrays: descs,
            ..Header::default()
        },
        arrays: data,
    }
}

fn answer(provider: &dyn GuidanceProvider, request: &Message) -> Result<Message> {
    let op = request.header.op.as_deref().unwrap_or("");
    match op {
        "info" => Ok(Message {
            header: Header {
                ok: Some(true),
                latent_channels: Some(provider.latent_channels()),
                downsample_factor: Some(provider.latent_downsample_factor()),
                ..Header::default()
            },
            arrays: Vec::new(),
        }),
        "encode" => {
            let (d, a) = request.array("image")?;
            let z = provider.latent_encode(&to_image(d, a)?)?;
            Ok(ok_with(vec![(latent_desc("latent", &z), z.data)]))
        }
        "decode" => {
            let (d, a) = request.array("latent")?;
            let x = provider.latent_decode(&to_latent(d, a)?)?;
            Ok(ok_with(vec![(image_desc("image", &x), x.data)]))
        }
        "encode_vjp" => {
            let (di, ai) = request.array("image")?;
            let (dc, ac) = request.array("cotangent")?;
            let image = to_image(di, ai)?;
            let g = provider.encode_vjp(&image, &to_latent(dc, ac)?)?;
            Ok(ok_with(vec![(image_desc("gradient", &image), g)]))
        }
        "predict_noise" => {
            let (dz, az) = request.array("noisy_latent")?;
            let (dm, am) = request.array("mask")?;
            let (di, ai) = request.array("image")?;
            let noisy = to_latent(dz, az)?;
            let mask = to_mask(dm, am)?;
            let image = to_image(di, ai)?;
            let h = &request.header;
            let crop = h.crop.unwrap_or(CropSpec {
                x0: 0,
                y0: 0,
                side: image.width,
                resample_to: image.width,
            });
            let eps = provider.predict_noise(&NoiseRequest {
                noisy_latent: &noisy,
                t: h.t.ok_or_else(|| Error::Guidance("predict_noise needs t".into()))?,
                prompt: h.prompt.as_deref().unwrap_or(""),
                mask: &mask,
                image: &image,
                view: h.view.unwrap_or(0),
                crop,
            })?;
            Ok(ok_with(vec![(latent_desc("noise", &eps), eps.data)]))
        }
        other => Err(Error::Guidance(format!("unknown op {other:?}"))),
    }
}

/// Serves requests from `input` until end of stream.
pub fn serve(provider: &dyn GuidanceProvider, input: &mut impl Read, output: &mut impl Write) -> Result<()> {
    loop {
        let Some(request) = read_message_or_eof(input)? else {
            return Ok(());
        };
        let response = handle_request(provider, &request);
        let arrays: Vec<&[f64]> = response.arrays.iter().map(|a| a.as_slice()).collect();
        write_message(output, &response.header, &arrays)?;
    }
}

/// A bidirectional byte stream to a provider.
pub trait Transport: Send {
    fn exchange(&mut self, header: &Header, arrays: &[&[f64]]) -> Result<Message>;
}

/// Transport over any reader/writer pair.
pub struct StreamTransport<R, W> {
    reader: R,
    writer: W,
}

impl<R: Read + Send, W: Write + Send> StreamTransport<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self { reader, writer }
    }
}

impl<R: Read + Send, W: Write + Send> Transport for StreamTransport<R, W> {
    fn exchange(&mut self, header: &Header, arrays: &[&[f64]]) -> Result<Message> {
        write_message(&mut self.writer, header, arrays)?;
        read_message(&mut self.reader)
    }
}

/// Transport to a child process speaking the protocol on stdin/stdout.
pub struct ChildTransport {
    child: Child,
    inner: StreamTransport<ChildStdout, ChildStdin>,
}

impl ChildTransport {
    pub fn spawn(program: &Path, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::io(program, e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self {
            child,
            inner: StreamTransport::new(stdout, stdin),
        })
    }
}

impl Transport for ChildTransport {
    fn exchange(&mut self, header: &Header, arrays: &[&[f64]]) -> Result<Message> {
        self.inner.exchange(header, arrays)
    }
}

impl Drop for ChildTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Provider backed by a remote process. Requests are serialized through a mutex.
pub struct ExternalProvider {
    id: String,
    transport: Mutex<Box<dyn Transport>>,
    latent_channels: usize,
    downsample_factor: usize,
}

impl ExternalProvider {
    pub fn connect(id: impl Into<String>, mut transport: Box<dyn Transport>) -> Result<Self> {
        let reply = transport.exchange(
            &Header {
                op: Some("info".into()),
                ..Header::default()
            },
            &[],
        )?;
        let reply = check_reply(reply)?;
        let latent_channels = reply
            .header
            .latent_channels
            .ok_or_else(|| Error::Guidance("info reply lacks latent_channels".into()))?;
        let downsample_factor = reply
            .header
            .downsample_factor
            .ok_or_else(|| Error::Guidance("info reply lacks downsample_factor".into()))?;
        Ok(Self {
            id: id.into(),
            transport: Mutex::new(transport),
            latent_channels,
            downsample_factor,
        })
    }

    fn call(&self, header: Header, arrays: &[&[f64]]) -> Result<Message> {
        let mut transport = self
            .transport
            .lock()
            .map_err(|_| Error::Guidance("provider transport poisoned".into()))?;
        check_reply(transport.exchange(&header, arrays)?)
    }
}

fn check_reply(reply: Message) -> Result<Message> {
    if reply.header.ok == Some(true) {
        Ok(reply)
    } else {
        Err(Error::Guidance(
            reply.header.error.unwrap_or_else(|| "provider reported failure".into()),
        ))
    }
}

fn request(op: &str, arrays: Vec<ArrayDesc>) -> Header {
    Header {
        op: Some(op.into()),
        arrays,
        ..Header::default()
    }
}

impl GuidanceProvider for ExternalProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn latent_downsample_factor(&self) -> usize {
        self.downsample_factor
    }

    fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    fn latent_encode(&self, image: &ImageFrame) -> Result<Latent> {
        let reply = self.call(request("encode", vec![image_desc("image", image)]), &[&image.data])?;
        let (d, a) = reply.array("latent")?;
        to_latent(d, a)
    }

    fn latent_decode(&self, latent: &Latent) -> Result<ImageFrame> {
        let reply = self.call(request("decode", vec![latent_desc("latent", latent)]), &[&latent.data])?;
        let (d, a) = reply.array("image")?;
        to_image(d, a)
    }

    fn encode_vjp(&self, image: &ImageFrame, cotangent: &Latent) -> Result<Vec<f64>> {
        let reply = self.call(
            request(
                "encode_vjp",
                vec![image_desc("image", image), latent_desc("cotangent", cotangent)],
            ),
            &[&image.data, &cotangent.data],
        )?;
        let (_, a) = reply.array("gradient")?;
        Ok(a.to_vec())
    }

    fn predict_noise(&self, req: &NoiseRequest<'_>) -> Result<Latent> {
        let mask: Vec<f64> = req.mask.bits.iter().map(|&b| b as u8 as f64).collect();
        let header = Header {
            op: Some("predict_noise".into()),
            t: Some(req.t),
            prompt: Some(req.prompt.to_string()),
            view: Some(req.view),
            crop: Some(req.crop),
            arrays: vec![
                latent_desc("noisy_latent", req.noisy_latent),
                ArrayDesc {
                    name: "mask".into(),
                    shape: vec![req.mask.height, req.mask.width],
                },
                image_desc("image", req.image),
            ],
            ..Header::default()
        };
        let reply = self.call(header, &[&req.noisy_latent.data, &mask, &req.image.data])?;
        let (d, a) = reply.array("noise")?;
        to_latent(d, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn message_roundtrip_through_bytes() {
        let header = Header {
            op: Some("encode".into()),
            t: Some(0.25),
            arrays: vec![ArrayDesc {
                name: "image".into(),
                shape: vec![1, 2, 3],
            }],
            ..Header::default()
        };
        let data = [0.0, 0.5, 1.0, 0.25, 0.75, 0.125];
        let mut bytes = Vec::new();
        write_message(&mut bytes, &header, &[&data]).unwrap();
        let json_len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 4 + json_len + 6 * 4);
        // payload is little-endian f32
        let first = f32::from_le_bytes(bytes[4 + json_len + 4..4 + json_len + 8].try_into().unwrap());
        assert_eq!(first, 0.5);
        let back = read_message(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.header, header);
        assert_eq!(back.arrays[0], data.to_vec());
    }

    #[test]
    fn unknown_op_is_reported() {
        let provider = super::super::OracleProvider::single(ImageFrame::new(2, 2), 1).unwrap();
        let reply = handle_request(
            &provider,
            &Message {
                header: request("frobnicate", vec![]),
                arrays: vec![],
            },
        );
        assert_eq!(reply.header.ok, Some(false));
        assert!(reply.header.error.unwrap().contains("frobnicate"));
    }
}
