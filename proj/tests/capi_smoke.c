#include "cardiotwin/cardiotwin.h"

#include <string.h>

/* Compiled as C to keep the header C-clean; returns 0 when the library
 * answers a net query and reports a bad config. */
int capi_smoke_from_c(void) {
    char* info = NULL;
    if (ct_net_info("{\"phi\":0}", &info) != CT_OK) return 1;
    int ok = strstr(info, "\"params\":2562") != NULL;
    ct_free(info);
    if (!ok) return 2;
    ct_scenario* s = NULL;
    if (ct_scenario_create("{\"mode\":\"warp\"}", &s) != CT_ERR_CONFIG) return 3;
    if (s != NULL) return 4;
    if (strlen(ct_last_error()) == 0) return 5;
    return 0;
}
