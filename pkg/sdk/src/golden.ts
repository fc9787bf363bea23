#!/usr/bin/env node
/**
 * Cross-codec check: re-encode a fixture of canonical documents and frames
 * and demand byte identity with the recorded hex.
 *
 * Usage: node golden.js <golden_frames.json>. Exit 0 iff every document
 * and frame round-trips to identical bytes.
 *
 * With --stdin, read one JSON document per line instead and print its
 * canonical encoding as hex, one line per input; differential fuzzers diff
 * that output against the other codec's bytes.
 */

import { readFileSync } from "node:fs";

import { FrameDecoder, canonicalDoc, encodeFrame } from "./wire.js";

interface GoldenDoc {
  doc_json: string;
  canonical_hex: string;
}

interface GoldenFrame {
  name: string;
  frame_hex: string;
}

// exit codes are set via process.exitCode, never process.exit: exit() can
// drop buffered stdio when the stream is a pipe, truncating the report
function encodeStdin(): void {
  const lines = readFileSync(0, "utf8").split("\n");
  const out: string[] = [];
  for (const line of lines) {
    if (line.trim() !== "") {
      out.push(canonicalDoc(JSON.parse(line)).toString("hex"));
    }
  }
  process.stdout.write(out.join("\n") + "\n");
}

function checkFixture(fixturePath: string): void {
  const golden = JSON.parse(readFileSync(fixturePath, "utf8")) as {
    docs: GoldenDoc[];
    frames: GoldenFrame[];
  };

  let bad = 0;

  for (const [i, row] of golden.docs.entries()) {
    const hex = canonicalDoc(JSON.parse(row.doc_json)).toString("hex");
    if (hex !== row.canonical_hex) {
      console.error(`doc ${i}: ${row.doc_json}\n  want ${row.canonical_hex}\n  got  ${hex}`);
      bad += 1;
    }
  }

  for (const row of golden.frames) {
    const raw = Buffer.from(row.frame_hex, "hex");
    const decoder = new FrameDecoder();
    let messages;
    try {
      messages = decoder.feed(raw);
    } catch (exc) {
      console.error(`frame ${row.name}: ${(exc as Error).message}`);
      bad += 1;
      continue;
    }
    if (messages.length !== 1 || decoder.pending !== 0) {
      console.error(`frame ${row.name}: expected exactly one frame`);
      bad += 1;
      continue;
    }
    const again = encodeFrame(messages[0]);
    if (!again.equals(raw)) {
      console.error(`frame ${row.name}:\n  want ${row.frame_hex}\n  got  ${again.toString("hex")}`);
      bad += 1;
    }
  }

  if (bad) {
    console.error(`${bad} mismatches`);
    process.exitCode = 1;
    return;
  }
  console.log(`${golden.docs.length} docs + ${golden.frames.length} frames byte-identical`);
}

const path = process.argv[2];

if (!path) {
  console.error("usage: golden.js <golden_frames.json> | golden.js --stdin");
  process.exitCode = 2;
} else if (path === "--stdin") {
  encodeStdin();
} else {
  checkFixture(path);
}
