import init, { ratchet_steps, safety_number, simulate, random_key } from "./pkg/ratchetlab_wasm_demo.js";

const $ = (id) => document.getElementById(id);

function fail(target, e) {
  target.innerHTML = "";
  const p = document.createElement("p");
  p.className = "err";
  p.textContent = String(e.message ?? e);
  target.append(p);
}

function table(rows, columns) {
  const t = document.createElement("table");
  const head = t.insertRow();
  for (const c of columns) {
    const th = document.createElement("th");
    th.textContent = c;
    head.append(th);
  }
  for (const r of rows) {
    const tr = t.insertRow();
    for (const c of columns) tr.insertCell().textContent = r[c];
  }
  return t;
}

function stepRatchet() {
  const out = $("ck-out");
  try {
    const res = JSON.parse(ratchet_steps($("ck").value, Number($("ck-steps").value)));
    out.replaceChildren(table(res.steps, ["counter", "chain_key", "cipher_key", "mac_key", "iv"]));
    const next = document.createElement("p");
    next.textContent = `next chain key: ${res.next_chain_key}`;
    out.append(next);
  } catch (e) {
    fail(out, e);
  }
}

let lastDigits = null;

function computeSafetyNumber() {
  const out = $("sn-out");
  try {
    const res = JSON.parse(safety_number($("sn-a").value, $("sn-ka").value, $("sn-b").value, $("sn-kb").value));
    const pre = document.createElement("pre");
    pre.textContent = `${res.grouped}\n\nQR text: ${res.qr}`;
    const note = document.createElement("p");
    if (lastDigits !== null) {
      const same = lastDigits === res.digits;
      note.className = same ? "ok" : "err";
      note.textContent = same ? "unchanged from the previous computation" : "changed: the keys are not the ones compared before";
    }
    lastDigits = res.digits;
    out.replaceChildren(pre, note);
  } catch (e) {
    fail($("sn-out"), e);
  }
}

function flipBit() {
  const hex = $("sn-kb").value.trim();
  const i = Math.floor(Math.random() * hex.length);
  const nibble = (parseInt(hex[i], 16) ^ (1 << Math.floor(Math.random() * 4))).toString(16);
  $("sn-kb").value = hex.slice(0, i) + nibble + hex.slice(i + 1);
  computeSafetyNumber();
}

function runSimulation() {
  const out = $("sim-out");
  out.textContent = "running...";
  // Let the browser paint before the (synchronous) simulation starts.
  setTimeout(() => {
    try {
      const t0 = performance.now();
      const res = JSON.parse(simulate(
        Number($("sim-users").value), Number($("sim-messages").value),
        Number($("sim-groups").value), Number($("sim-seed").value)));
      const ms = Math.round(performance.now() - t0);
      const s = res.score;
      const summary = document.createElement("p");
      summary.textContent = `${res.ledger_rows} ledger rows, ${res.decrypted} copies decrypted by recipients, ${ms} ms. ` +
        `Blind group inference: ${s.true_positives}/${s.inferred} inferred groups are real (precision ${s.precision.toFixed(3)}), ` +
        `${s.found}/${s.eligible} real groups found (recall ${s.recall.toFixed(3)}).`;
      const pre = document.createElement("pre");
      pre.textContent = res.text;
      out.replaceChildren(summary, pre);
    } catch (e) {
      fail(out, e);
    }
  }, 10);
}

await init();
$("sn-ka").value = random_key();
$("sn-kb").value = random_key();
$("ck-random").onclick = () => { $("ck").value = random_key(); stepRatchet(); };
$("ck-run").onclick = stepRatchet;
$("sn-run").onclick = computeSafetyNumber;
$("sn-flip").onclick = flipBit;
$("sim-run").onclick = runSimulation;
stepRatchet();
computeSafetyNumber();
