/**
 * SplitMix64 over BigInt, bit-compatible with the gaborsense Python stream.
 *
 * The i-th u64 (0-based) of a stream seeded with s is mix64(s + (i+1)*GAMMA);
 * doubles take the top 53 bits of each word. Keeping the two implementations
 * bit-identical lets artifacts seeded on either side be checked on the other.
 */

const MASK64 = (1n << 64n) - 1n;
const GAMMA = 0x9e3779b97f4a7c15n;
const MIX1 = 0xbf58476d1ce4e5b9n;
const MIX2 = 0x94d049bb133111ebn;

export function mix64(z: bigint): bigint {
  z &= MASK64;
  z = ((z ^ (z >> 30n)) * MIX1) & MASK64;
  z = ((z ^ (z >> 27n)) * MIX2) & MASK64;
  return z ^ (z >> 31n);
}

/** Child seed for stream `index`: mix64(master + (index + 1) * GAMMA). */
export function deriveSeed(masterSeed: bigint, index: number): bigint {
  return mix64((masterSeed + (BigInt(index) + 1n) * GAMMA) & MASK64);
}

export class SplitMix64 {
  private state: bigint;

  constructor(seed: bigint | number) {
    this.state = BigInt(seed) & MASK64;
  }

  nextU64(): bigint {
    this.state = (this.state + GAMMA) & MASK64;
    return mix64(this.state);
  }

  /** Uniform double in [0, 1), built from the top 53 bits. */
  nextF64(): number {
    return Number(this.nextU64() >> 11n) * 2 ** -53;
  }

  uniform(lo: number, hi: number): number {
    return lo + (hi - lo) * this.nextF64();
  }
}
