#include <stdio.h>
#include "otfm.h"

int main(void) {
    double v = 0.0;
    if (otfm_hqnr(0.018, 0.029, &v) != OTFM_STATUS_OK) return 1;
    OtfmStatus bad = otfm_hqnr(1.5, 0.0, &v);
    char msg[128];
    otfm_last_error(msg, sizeof msg);
    OtfmStatus null = otfm_hqnr(0.0, 0.0, NULL);
    printf("hqnr=%.3f err=%d null=%d\n", v, (int)bad, (int)null);
    return msg[0] == 0;
}
