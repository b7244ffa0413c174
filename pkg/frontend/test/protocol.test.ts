// Codec + display parity tests.  The golden display vectors are shared with
// the backend test suite; the two renderers must agree byte-for-byte.

import assert from "node:assert/strict";
import { readFileSync } from "node:fs";
import test from "node:test";

import {
  DEFAULT_STATE,
  DIAL_TABLE,
  Envelope,
  applyControl,
  applyReading,
  decodeEnvelope,
  encodeEnvelope,
  renderDisplay,
  stateDisplay,
} from "../src/protocol.js";

interface GoldenCase {
  ordinal: number;
  counts: number;
  value_micro: number;
  overload: boolean;
  blank: boolean;
  display: string;
}

const golden: GoldenCase[] = JSON.parse(
  readFileSync(new URL("../../test/display_golden.json", import.meta.url), "utf-8"),
);

test("display matches the shared golden vectors", () => {
  for (const c of golden) {
    assert.equal(
      renderDisplay(c.ordinal, c.value_micro, c.overload, c.blank),
      c.display,
      JSON.stringify(c),
    );
  }
});

test("golden control envelope text is byte-stable", () => {
  const env: Envelope = {
    kind: "CONTROL",
    origin: 5,
    group: 2,
    seq: 0,
    body: { instrument: 0, code: "SET_DIAL", value: 3 },
  };
  const text =
    '{"kind":"CONTROL","origin":5,"group":2,"seq":0,' +
    '"body":{"instrument":0,"code":"SET_DIAL","value":3}}';
  assert.equal(encodeEnvelope(env), text);
  assert.deepEqual(decodeEnvelope(text), env);
});

test("decode rejects junk", () => {
  assert.throws(() => decodeEnvelope("{nope"), /MALFORMED_TEXT/);
  assert.throws(
    () => decodeEnvelope('{"kind":"NOPE","origin":0,"group":0,"seq":0,"body":{}}'),
    /UNKNOWN_KIND/,
  );
  assert.throws(
    () => decodeEnvelope('{"kind":"PING","origin":"x","group":0,"seq":0,"body":{}}'),
    /INVALID_BODY/,
  );
});

test("dial table covers all 12 ordinals in order", () => {
  assert.equal(DIAL_TABLE.length, 12);
  DIAL_TABLE.forEach((r, i) => assert.equal(r.ordinal, i));
});

test("state folds mirror the backend rules", () => {
  let state = { ...DEFAULT_STATE };
  assert.equal(stateDisplay(state), "0.00 V");

  state = applyControl(state, { instrument: 0, code: "SET_DIAL", value: 6 });
  assert.equal(state.dial, 6);

  state = applyReading(state, {
    mode: "OHM",
    range: 6,
    overload: false,
    value_micro: 1_000_000_000,
  });
  assert.equal(stateDisplay(state), "1.000 kΩ");

  // A stale reading re-quantizes off-scale after a dial turn.
  state = applyControl(state, { instrument: 0, code: "SET_DIAL", value: 5 });
  assert.equal(stateDisplay(state), "OL");

  state = applyControl(state, { instrument: 0, code: "SET_POWER", value: 0 });
  assert.equal(stateDisplay(state), "");
});
