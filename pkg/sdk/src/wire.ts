/**
 * Canonical codec and framing, matching the Python runtime byte for byte.
 *
 * A frame is a 4-byte big-endian length prefix followed by a UTF-8 payload
 * holding exactly one message. Payload text is deterministic: map keys
 * sorted ascending by code point, no insignificant whitespace, numbers in
 * shortest round-trip decimal form.
 *
 * Number form, precisely: integral values within the exact-integer range
 * (|x| <= 2^53 - 1, excluding -0) print as plain decimal integers and decode
 * as ints on the Python side. Everything else prints as a float: shortest
 * digit string, plain decimal while the decimal exponent is in (-6, 17),
 * exponent notation outside, and integral floats keep a ".0" or exponent
 * marker. That layout is NOT what String(x) produces (ECMAScript switches
 * to exponent form at 21 digits, and never writes a ".0"), hence the
 * hand-rolled formatter below.
 */

export const FRAME_LIMIT = 16 * 1024 * 1024;
export const CHUNK_LIMIT = 64 * 1024;

export const TASK_STATES = new Set([
  "created", "scheduled", "running", "completed", "failed", "canceled",
]);
export const LOG_STREAMS = new Set(["out", "err"]);

export type Doc = null | boolean | number | string | Doc[] | { [key: string]: Doc };

export interface Message {
  type: string;
  [field: string]: Doc;
}

export class WireError extends Error {
  constructor(message?: string) {
    super(message);
    this.name = new.target.name;
  }
}

export class NonEncodable extends WireError {}

export class FrameTooLarge extends WireError {}

export class MalformedPayload extends WireError {}

// ---------------------------------------------------------------------------
// canonical text encoding

/** Shortest digits D and point position n such that |x| = 0.D * 10**n. */
function decomposeFloat(x: number): [string, number] {
  // String(x) is the shortest decimal that round-trips, same contract as
  // Python's repr; only the layout differs, and that is rebuilt below.
  const s = String(Math.abs(x));
  const [mant, exp] = s.split("e");
  const e = exp === undefined ? 0 : Number(exp);
  const dot = mant.indexOf(".");
  const intpart = dot < 0 ? mant : mant.slice(0, dot);
  const frac = dot < 0 ? "" : mant.slice(dot + 1);
  let digits = intpart + frac;
  let point = intpart.length + e;
  const stripped = digits.replace(/^0+/, "");
  point -= digits.length - stripped.length;
  return [stripped.replace(/0+$/, ""), point];
}

/** Canonical decimal form of a finite double treated as a float. */
export function formatFloat(x: number): string {
  if (!Number.isFinite(x)) {
    throw new NonEncodable(`${x} is outside the document model`);
  }
  if (x === 0) {
    return Object.is(x, -0) ? "-0.0" : "0.0";
  }
  const sign = x < 0 ? "-" : "";
  const [digits, n] = decomposeFloat(x);
  const k = digits.length;
  if (n >= 17 || n <= -6) {
    const head = k === 1 ? digits : digits[0] + "." + digits.slice(1);
    const e = n - 1;
    return `${sign}${head}e${e >= 0 ? "+" : "-"}${Math.abs(e)}`;
  }
  if (n >= k) {
    return sign + digits + "0".repeat(n - k) + ".0";
  }
  if (n >= 1) {
    return sign + digits.slice(0, n) + "." + digits.slice(n);
  }
  return sign + "0." + "0".repeat(-n) + digits;
}

/** Canonical form of any number: exact integers plain, the rest as floats. */
export function formatNumber(x: number): string {
  if (Number.isInteger(x) && Math.abs(x) <= Number.MAX_SAFE_INTEGER
      && !Object.is(x, -0)) {
    return String(x);
  }
  return formatFloat(x);
}

function escapeString(s: string): string {
  if (!s.isWellFormed()) {
    throw new NonEncodable("string with a lone surrogate is outside the document model");
  }
  // JSON.stringify already escapes exactly the canonical set: quote,
  // backslash, \b \f \n \r \t, and lowercase \u00xx for other controls.
  return JSON.stringify(s);
}

function isPlainObject(value: object): boolean {
  const proto = Object.getPrototypeOf(value);
  return proto === Object.prototype || proto === null;
}

/** Compare by Unicode code point, matching Python's str ordering. */
export function codePointCompare(a: string, b: string): number {
  let i = 0;
  let j = 0;
  while (i < a.length && j < b.length) {
    const ca = a.codePointAt(i)!;
    const cb = b.codePointAt(j)!;
    if (ca !== cb) {
      return ca < cb ? -1 : 1;
    }
    i += ca > 0xffff ? 2 : 1;
    j += cb > 0xffff ? 2 : 1;
  }
  const ra = a.length - i;
  const rb = b.length - j;
  return ra === rb ? 0 : ra < rb ? -1 : 1;
}

function serialize(value: unknown, out: string[]): void {
  if (value === null) {
    out.push("null");
  } else if (value === true) {
    out.push("true");
  } else if (value === false) {
    out.push("false");
  } else if (typeof value === "number") {
    out.push(formatNumber(value));
  } else if (typeof value === "string") {
    out.push(escapeString(value));
  } else if (Array.isArray(value)) {
    out.push("[");
    for (let i = 0; i < value.length; i++) {
      if (i) {
        out.push(",");
      }
      serialize(value[i], out);
    }
    out.push("]");
  } else if (typeof value === "object" && isPlainObject(value)) {
    out.push("{");
    const keys = Object.keys(value).sort(codePointCompare);
    for (let i = 0; i < keys.length; i++) {
      if (i) {
        out.push(",");
      }
      out.push(escapeString(keys[i]));
      out.push(":");
      serialize((value as Record<string, unknown>)[keys[i]], out);
    }
    out.push("}");
  } else {
    throw new NonEncodable(`value of type ${typeof value} is outside the document model`);
  }
}

/** Canonical UTF-8 encoding of a bare document value (no framing). */
export function canonicalDoc(value: unknown): Buffer {
  const out: string[] = [];
  serialize(value, out);
  return Buffer.from(out.join(""), "utf8");
}

export function isDocument(value: unknown): value is Doc {
  if (value === null || typeof value === "boolean" || typeof value === "string") {
    return true;
  }
  if (typeof value === "number") {
    return Number.isFinite(value);
  }
  if (Array.isArray(value)) {
    return value.every(isDocument);
  }
  if (typeof value === "object" && isPlainObject(value)) {
    return Object.values(value).every(isDocument);
  }
  return false;
}

// ---------------------------------------------------------------------------
// framing

export function framePayload(payload: Buffer): Buffer {
  if (payload.length > FRAME_LIMIT) {
    throw new FrameTooLarge(`payload is ${payload.length} bytes, cap is ${FRAME_LIMIT}`);
  }
  const head = Buffer.alloc(4);
  head.writeUInt32BE(payload.length, 0);
  return Buffer.concat([head, payload]);
}

export function encodeFrame(message: Message): Buffer {
  return framePayload(canonicalDoc(message));
}

const utf8Strict = new TextDecoder("utf-8", { fatal: true });

function decodePayload(payload: Buffer): Message {
  let text: string;
  try {
    text = utf8Strict.decode(payload);
  } catch {
    throw new MalformedPayload("payload is not UTF-8");
  }
  let obj: unknown;
  try {
    obj = JSON.parse(text);
  } catch (exc) {
    throw new MalformedPayload(`payload is not a document: ${(exc as Error).message}`);
  }
  if (obj === null || typeof obj !== "object" || Array.isArray(obj)
      || typeof (obj as Message).type !== "string") {
    throw new MalformedPayload("payload must be a map with a string 'type'");
  }
  return obj as Message;
}

/**
 * Incremental decoder: feed arbitrary byte slices, get whole messages.
 *
 * Splitting a stream at any boundary and feeding the pieces yields the
 * same message sequence as feeding it whole.
 */
export class FrameDecoder {
  private buf: Buffer = Buffer.alloc(0);

  feed(data: Buffer): Message[] {
    this.buf = this.buf.length ? Buffer.concat([this.buf, data]) : data;
    const messages: Message[] = [];
    let offset = 0;
    while (this.buf.length - offset >= 4) {
      const length = this.buf.readUInt32BE(offset);
      if (length > FRAME_LIMIT) {
        throw new MalformedPayload(`declared frame length ${length} exceeds cap`);
      }
      if (this.buf.length - offset < 4 + length) {
        break;
      }
      messages.push(decodePayload(this.buf.subarray(offset + 4, offset + 4 + length)));
      offset += 4 + length;
    }
    if (offset) {
      this.buf = this.buf.subarray(offset);
    }
    return messages;
  }

  get pending(): number {
    return this.buf.length;
  }
}

// ---------------------------------------------------------------------------
// message builders (the child-side vocabulary)

export function hello(taskId: string, token?: string): Message {
  const msg: Message = { type: "hello", task_id: taskId };
  if (token !== undefined) {
    msg.token = token;
  }
  return msg;
}

export function status(taskId: string, state: string): Message {
  return { type: "status", task_id: taskId, state };
}

export function log(taskId: string, stream: string, text: string): Message {
  return { type: "log", task_id: taskId, stream, text };
}

export function taskReturn(taskId: string, value: Doc): Message {
  return { type: "return", task_id: taskId, value };
}

export function taskFail(taskId: string, code: string, message = ""): Message {
  return { type: "fail", task_id: taskId, error: { code, message } };
}

export function spawnRequest(specDoc: Doc, parentEndpoint?: string): Message {
  const msg: Message = { type: "spawn_request", spec: specDoc };
  if (parentEndpoint !== undefined) {
    msg.parent_endpoint = parentEndpoint;
  }
  return msg;
}
