"""Design and verification of dissipativity-certified AC microgrid controllers.

The pipeline is: operating point (:mod:`setpoint`, :mod:`equilibrium`),
local voltage controllers with passivity indices (:mod:`localsynth`),
distributed consensus gains and communication topology (:mod:`codesign`),
and nonlinear closed-loop simulation (:mod:`sim`).
"""

__version__ = "0.1.0"
