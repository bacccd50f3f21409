"""Regenerate the bundled LYSO attenuation table.

Needs ``xraydb`` (not a runtime dependency)::

    pip install xraydb
    python tools/make_attenuation_table.py > src/comptonimager/data/lyso_attenuation.csv

The Elam tables behind xraydb stop at 800 keV. Above that, the Compton column
follows the Klein-Nishina total cross section per electron scaled to match at
800 keV, and the photoelectric and Rayleigh columns are power laws fitted in
log-log space over 0.5-0.8 MeV.
"""
import sys
import warnings

import numpy as np
import xraydb

FORMULA = "Lu1.9Y0.1SiO5"
DENSITY = 7.1  # g/cm^3
ELAM_MAX = 0.8  # MeV
MC2 = 0.51099895


def kn_total(e_mev):
    """Klein-Nishina total cross section per electron, arbitrary units."""
    k = e_mev / MC2
    a = (1 + k) / k**2 * (2 * (1 + k) / (1 + 2 * k) - np.log(1 + 2 * k) / k)
    return a + np.log(1 + 2 * k) / (2 * k) - (1 + 3 * k) / (1 + 2 * k) ** 2


def elam(e_mev, kind):
    # material_mu returns 1/cm
    return xraydb.material_mu(FORMULA, e_mev * 1e6, density=DENSITY, kind=kind) / 10


def columns(e_mev):
    if e_mev <= ELAM_MAX:
        return elam(e_mev, "photo"), elam(e_mev, "incoh"), elam(e_mev, "coh")
    out = []
    fit_e = np.array([0.5, 0.6, 0.7, ELAM_MAX])
    for kind in ("photo", "coh"):
        fit_mu = np.array([elam(e, kind) for e in fit_e])
        slope, icpt = np.polyfit(np.log(fit_e), np.log(fit_mu), 1)
        out.append(np.exp(icpt + slope * np.log(e_mev)))
    compton = elam(ELAM_MAX, "incoh") * kn_total(e_mev) / kn_total(ELAM_MAX)
    return out[0], compton, out[1]


def main(out=sys.stdout):
    warnings.simplefilter("ignore")
    energies = np.geomspace(0.02, 2.0, 121)
    energies = np.sort(np.concatenate([energies, [0.0632, 0.06345, ELAM_MAX]]))
    out.write("energy_mev,mu_total_mm,mu_photo_mm,mu_compton_mm\n")
    for e in energies:
        photo, compton, coh = columns(e)
        out.write(f"{e:.9g},{photo + compton + coh:.9g},{photo:.9g},{compton:.9g}\n")


if __name__ == "__main__":
    main()
