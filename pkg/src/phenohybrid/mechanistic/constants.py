"""Published coefficients of the baseline chill models.

Utah model
    Richardson, E. A., Seeley, S. D. & Walker, D. R. (1974). A model for
    estimating the completion of rest for 'Redhaven' and 'Elberta' peach
    trees. HortScience 9(4), 331-332.

    Chill units per hour, by hourly temperature (degC). Each band is closed
    at its upper bound, i.e. a temperature ``T`` receives the weight of the
    first band with ``T <= upper``:

    ==========  ==========  ======
    lower       upper       weight
    ==========  ==========  ======
    -inf        1.4          0.0
    1.5         2.4          0.5
    2.5         9.1          1.0
    9.2         12.4         0.5
    12.5        15.9         0.0
    16.0        18.0        -0.5
    18.1        +inf        -1.0
    ==========  ==========  ======

Chill Days model
    Cesaraccio, C., Spano, D., Snyder, R. L. & Duce, P. (2004). Chilling and
    forcing model to predict bud-burst of crop and forest species.
    Agricultural and Forest Meteorology 126, 1-13.

    Daily chill ``Cd`` (<= 0 in the original sign convention) from the daily
    minimum ``Tn``, maximum ``Tx`` and mean ``TM`` relative to the threshold
    temperature ``Tc``:

    ====  =========================  ==============================================
    case  condition                  Cd
    ====  =========================  ==============================================
    1     0 <= Tc <= Tn <= Tx        0
    2     0 <= Tn <= Tc < Tx         -((TM - Tn) - (Tx - Tc) / 2)
    3     0 <= Tn <= Tx <= Tc        -(TM - Tn)
    4     Tn < 0 < Tx <= Tc          -(Tx / (Tx - Tn)) * (Tx / 2)
    5     Tn < 0 < Tc < Tx           -((Tx / (Tx - Tn)) * (Tx / 2) - (Tx - Tc) / 2)
    ====  =========================  ==============================================

    Days matching no case (the whole day at or below 0 degC) contribute
    nothing. This package accumulates ``-Cd`` floored at zero.
"""

import numpy as np

UTAH_UPPER_BOUNDS = np.array([1.4, 2.4, 9.1, 12.4, 15.9, 18.0])
UTAH_WEIGHTS = np.array([0.0, 0.5, 1.0, 0.5, 0.0, -0.5, -1.0])
UTAH_MAX_WEIGHT = float(UTAH_WEIGHTS.max())

CHILL_HOURS_LOWER = 0.0
CHILL_HOURS_UPPER = 7.2
